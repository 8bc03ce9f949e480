//! Pixel-wise softmax and the cross-entropy / weighted cross-entropy / focal
//! loss family, each returning its value together with the exact gradient
//! with respect to the logits.
//!
//! All three losses share one per-pixel form,
//! `l = -w_t * m(p_t) * ln(max(p_t, eps))`, where `t` is the true class,
//! `m = 1` for cross-entropy and `m = (1 - p_t)^2` for focal loss.
//! The gradient is obtained from `dl/dy_k = (dl/dp_t) * p_t * (delta_tk - p_k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelCube, LogitCube, ProbabilityCube};

/// Probabilities are clipped at this value before taking the log.
pub const PROB_EPS: f64 = 1e-10;
/// The focal modulating exponent is fixed at 2.
pub const FOCAL_GAMMA: f64 = 2.0;

/// Per-class loss weights, index 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("class weights must not be empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("class weight {w} must be > 0")));
        }
        Ok(Self(weights))
    }

    /// `w_n = 1` for every class.
    pub fn equal(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    /// Background weight 1, every marker class `foreground`.
    pub fn foreground(num_classes: usize, foreground: f64) -> Result<Self> {
        let mut w = vec![foreground; num_classes];
        w[0] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_equal(&self) -> bool {
        self.0.iter().all(|&w| w == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over pixels, the literal form of the loss equations.
    Sum,
    /// Sum divided by the pixel count.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub weights: ClassWeights,
    #[serde(default)]
    pub reduction: Reduction,
    /// Treat `(1 - p)^2` as a constant when differentiating focal loss.
    #[serde(default)]
    pub detach_focal_factor: bool,
}

impl LossSpec {
    pub fn cross_entropy(weights: ClassWeights) -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            weights,
            reduction: Reduction::Mean,
            detach_focal_factor: false,
        }
    }

    pub fn focal(weights: ClassWeights) -> Self {
        Self {
            kind: LossKind::Focal,
            weights,
            reduction: Reduction::Mean,
            detach_focal_factor: false,
        }
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    /// Loss value and logit gradient for a probability cube and one-hot labels.
    pub fn evaluate(&self, probs: &ProbabilityCube, labels: &LabelCube) -> Result<LossOutput> {
        let truth = true_classes(probs, labels)?;
        self.evaluate_ids(probs, &truth)
    }

    /// Same as [`evaluate`](Self::evaluate) with the labels given as class ids.
    pub fn evaluate_ids(&self, probs: &ProbabilityCube, truth: &[u8]) -> Result<LossOutput> {
        let hw = probs.width() * probs.height();
        if truth.len() != hw {
            return Err(Error::Shape(format!(
                "{} labels for {hw} pixels",
                truth.len()
            )));
        }
        if self.weights.len() != probs.num_classes() {
            return Err(Error::Shape(format!(
                "{} class weights for {} classes",
                self.weights.len(),
                probs.num_classes()
            )));
        }
        let nc = probs.num_classes();
        let data = probs.data();
        let w = self.weights.as_slice();
        let scale = match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / hw as f64,
        };
        let mut value = 0.0;
        let mut grad = vec![0.0; nc * hw];
        for (p, &t) in truth.iter().enumerate() {
            let t = t as usize;
            if t >= nc {
                return Err(Error::InvalidLabel(format!("class id {t} at pixel {p}")));
            }
            let pt = data[t * hw + p];
            let (loss, dl_dp_times_p) = pixel_loss(self.kind, self.detach_focal_factor, w[t], pt);
            value += loss;
            // dl/dy_k = (dl/dp_t * p_t) * (delta_tk - p_k)
            let g = dl_dp_times_p * scale;
            if g != 0.0 {
                for k in 0..nc {
                    let delta = if k == t { 1.0 } else { 0.0 };
                    grad[k * hw + p] = g * (delta - data[k * hw + p]);
                }
            }
        }
        Ok(LossOutput {
            value: value * scale,
            grad,
        })
    }
}

/// Returns `(loss, dl/dp_t * p_t)` for one pixel.
fn pixel_loss(kind: LossKind, detach: bool, w: f64, pt: f64) -> (f64, f64) {
    let clipped = pt < PROB_EPS;
    let log_p = pt.max(PROB_EPS).ln();
    // d(ln max(p, eps))/dp * p
    let dlog_p = if clipped { 0.0 } else { 1.0 };
    match kind {
        LossKind::CrossEntropy => (-w * log_p, -w * dlog_p),
        LossKind::Focal => {
            let q = 1.0 - pt;
            let factor = q * q;
            let loss = -w * factor * log_p;
            let dfactor_p = if detach { 0.0 } else { -2.0 * q * pt };
            (loss, -w * (dfactor_p * log_p + factor * dlog_p))
        }
    }
}

fn true_classes(probs: &ProbabilityCube, labels: &LabelCube) -> Result<Vec<u8>> {
    if probs.width() != labels.width()
        || probs.height() != labels.height()
        || probs.num_classes() != labels.num_classes()
    {
        return Err(Error::Shape(format!(
            "probabilities {}x{}x{} vs labels {}x{}x{}",
            probs.width(),
            probs.height(),
            probs.num_classes(),
            labels.width(),
            labels.height(),
            labels.num_classes()
        )));
    }
    labels
        .validate()
        .map_err(|e| Error::InvalidLabel(e.to_string()))?;
    let hw = labels.width() * labels.height();
    Ok((0..hw)
        .map(|p| {
            (0..labels.num_classes())
                .find(|&n| labels.layer(n)[p] == 1)
                .unwrap() as u8
        })
        .collect())
}

/// Loss value and its gradient with respect to the logits (layer-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `p_n = exp(y_n) / sum_i exp(y_i)` per pixel, with max subtraction.
pub fn softmax_pixelwise(logits: &LogitCube) -> Result<ProbabilityCube> {
    if let Some(v) = logits.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {v}")));
    }
    let hw = logits.width() * logits.height();
    let nc = logits.num_classes();
    let y = logits.data();
    let mut out = vec![0.0; nc * hw];
    for p in 0..hw {
        let max = (0..nc).map(|n| y[n * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for n in 0..nc {
            let e = (y[n * hw + p] - max).exp();
            out[n * hw + p] = e;
            sum += e;
        }
        for n in 0..nc {
            out[n * hw + p] /= sum;
        }
    }
    ProbabilityCube::new_unchecked(logits.width(), logits.height(), nc, out)
}

/// `-sum w_n L_n ln P_n`; with `w = 1` this is plain cross-entropy.
pub fn weighted_cross_entropy(
    probs: &ProbabilityCube,
    labels: &LabelCube,
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<LossOutput> {
    LossSpec::cross_entropy(weights.clone())
        .with_reduction(reduction)
        .evaluate(probs, labels)
}

/// `-sum w_n (1 - P_n)^2 L_n ln P_n`, differentiated through the modulating factor.
pub fn focal_loss(
    probs: &ProbabilityCube,
    labels: &LabelCube,
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<LossOutput> {
    LossSpec::focal(weights.clone())
        .with_reduction(reduction)
        .evaluate(probs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use crate::types::{encode_onehot, LabelMap};

    fn single(p_true: f64, class: usize) -> (ProbabilityCube, LabelCube) {
        let rest = (1.0 - p_true) / 5.0;
        let mut data = vec![rest; 6];
        data[class] = p_true;
        let probs = ProbabilityCube::new(1, 1, 6, data).unwrap();
        let labels = encode_onehot(&LabelMap::new(1, 1, 6, vec![class as u8]).unwrap());
        (probs, labels)
    }

    #[test]
    fn softmax_closed_forms() {
        let eq = LogitCube::new(1, 1, 6, vec![0.3; 6]).unwrap();
        let p = softmax_pixelwise(&eq).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let mut y = vec![0.0; 6];
        y[0] = 2f64.ln();
        let p = softmax_pixelwise(&LogitCube::new(1, 1, 6, y.clone()).unwrap()).unwrap();
        assert!((p.data()[0] - 2.0 / 7.0).abs() < 1e-15);
        assert!(p.data()[1..].iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));

        let shifted: Vec<f64> = y.iter().map(|v| v + 123.0).collect();
        let q = softmax_pixelwise(&LogitCube::new(1, 1, 6, shifted).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let y = LogitCube::new(1, 1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_pixelwise(&y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn scalar_values() {
        let (p, l) = single(0.1, 2);
        let w = ClassWeights::foreground(6, 50.0).unwrap();
        let out = weighted_cross_entropy(&p, &l, &w, Reduction::Sum).unwrap();
        assert!((out.value - 50.0 * -(0.1f64.ln())).abs() < 1e-12);
        assert!((out.value - 115.129).abs() < 1e-3);

        let (p, l) = single(0.5, 0);
        let out = focal_loss(&p, &l, &ClassWeights::equal(6), Reduction::Sum).unwrap();
        assert!((out.value - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((out.value - 0.173287).abs() < 1e-6);

        let (p, l) = single(1.0, 4);
        for kind in [LossKind::CrossEntropy, LossKind::Focal] {
            let spec = LossSpec {
                kind,
                weights: ClassWeights::equal(6),
                reduction: Reduction::Sum,
                detach_focal_factor: false,
            };
            assert_eq!(spec.evaluate(&p, &l).unwrap().value, 0.0);
        }
    }

    #[test]
    fn shape_and_label_errors() {
        let (p, _) = single(0.5, 0);
        let l = encode_onehot(&LabelMap::background(2, 1, 6).unwrap());
        assert!(matches!(
            weighted_cross_entropy(&p, &l, &ClassWeights::equal(6), Reduction::Sum),
            Err(Error::Shape(_))
        ));
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn clipped_probability_has_finite_loss() {
        let mut data = vec![0.0; 6];
        data[0] = 1.0;
        let p = ProbabilityCube::new(1, 1, 6, data).unwrap();
        let l = encode_onehot(&LabelMap::new(1, 1, 6, vec![3]).unwrap());
        let out = weighted_cross_entropy(&p, &l, &ClassWeights::equal(6), Reduction::Sum).unwrap();
        assert!((out.value - -(PROB_EPS.ln())).abs() < 1e-9);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    fn fd_check(spec: &LossSpec, rng: &mut ChaCha8Rng) -> f64 {
        let (w, h, nc) = (4, 4, 6);
        let y: Vec<f64> = (0..w * h * nc).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ids: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..nc as u8)).collect();
        let loss = |y: &[f64]| {
            let p = softmax_pixelwise(&LogitCube::new(w, h, nc, y.to_vec()).unwrap()).unwrap();
            spec.evaluate_ids(&p, &ids).unwrap()
        };
        let analytic = loss(&y).grad;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..y.len() {
            let mut a = y.clone();
            let mut b = y.clone();
            a[i] += eps;
            b[i] -= eps;
            let num = (loss(&a).value - loss(&b).value) / (2.0 * eps);
            let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            LossSpec::cross_entropy(ClassWeights::equal(6)),
            LossSpec::cross_entropy(ClassWeights::foreground(6, 50.0).unwrap()),
            LossSpec::focal(ClassWeights::equal(6)),
        ];
        for spec in &specs {
            for _ in 0..20 {
                let rel = fd_check(spec, &mut rng);
                assert!(rel <= 1e-4, "{:?}: relative error {rel}", spec.kind);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_and_loss_invariants(
            y in proptest::collection::vec(-30.0f64..30.0, 12),
            ids in proptest::collection::vec(0u8..6, 2),
            w in 1.0f64..500.0,
        ) {
            let p = softmax_pixelwise(&LogitCube::new(2, 1, 6, y).unwrap()).unwrap();
            for px in 0..2 {
                let s: f64 = (0..6).map(|k| p.data()[k * 2 + px]).sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for spec in [
                LossSpec::cross_entropy(ClassWeights::foreground(6, w).unwrap()),
                LossSpec::focal(ClassWeights::foreground(6, w).unwrap()),
            ] {
                let out = spec.evaluate_ids(&p, &ids).unwrap();
                proptest::prop_assert!(out.value >= 0.0 && out.value.is_finite());
                // softmax is shift invariant, so each pixel's logit gradient sums to zero
                for px in 0..2 {
                    let g: f64 = (0..6).map(|k| out.grad[k * 2 + px]).sum();
                    proptest::prop_assert!(g.abs() < 1e-9 * w);
                }
            }
        }
    }
}
