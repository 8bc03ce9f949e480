use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{LogitCube, NormalizedImage};
use crate::unet::{Model, Tape};

/// What the trainer needs from a model: a recorded forward pass, the
/// matching backward pass, and flat access to its parameters.
pub trait Network: Clone {
    type Tape;

    /// Forward pass in training mode. Dropout is drawn from `rng` when given.
    fn forward_record(
        &self,
        img: &NormalizedImage,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LogitCube, Self::Tape)>;

    /// Accumulates parameter gradients into `grad`.
    fn backward(&self, tape: &Self::Tape, dlogits: &[f64], grad: &mut Self) -> Result<()>;

    /// Same architecture, all parameters zero.
    fn zeroed(&self) -> Self;

    fn param_slices(&self) -> Vec<&[f32]>;

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]>;
}

impl Network for Model {
    type Tape = Tape<f32>;

    fn forward_record(
        &self,
        img: &NormalizedImage,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LogitCube, Tape<f32>)> {
        Model::forward_record(self, img, rng)
    }

    fn backward(&self, tape: &Tape<f32>, dlogits: &[f64], grad: &mut Self) -> Result<()> {
        Model::backward(self, tape, dlogits, grad)
    }

    fn zeroed(&self) -> Self {
        self.zeros_like()
    }

    fn param_slices(&self) -> Vec<&[f32]> {
        self.params().into_iter().map(|p| p.data).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.params_mut()
    }
}

/// Per-pixel affine model: `y_n = w_n * x + b_n`. Convex under
/// cross-entropy; used for small convergence checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPixelModel {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LinearPixelModel {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            weight: vec![0.0; num_classes],
            bias: vec![0.0; num_classes],
        }
    }
}

impl Network for LinearPixelModel {
    type Tape = NormalizedImage;

    fn forward_record(
        &self,
        img: &NormalizedImage,
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LogitCube, NormalizedImage)> {
        let hw = img.width() * img.height();
        let mut data = Vec::with_capacity(hw * self.weight.len());
        for (w, b) in self.weight.iter().zip(&self.bias) {
            data.extend(img.pixels().iter().map(|&x| (w * x + b) as f64));
        }
        Ok((
            LogitCube::new(img.width(), img.height(), self.weight.len(), data)?,
            img.clone(),
        ))
    }

    fn backward(&self, img: &NormalizedImage, dlogits: &[f64], grad: &mut Self) -> Result<()> {
        let hw = img.width() * img.height();
        if dlogits.len() != hw * self.weight.len() {
            return Err(Error::Shape("logit gradient size".into()));
        }
        for (n, d) in dlogits.chunks_exact(hw).enumerate() {
            let (mut gw, mut gb) = (0.0f64, 0.0f64);
            for (&g, &x) in d.iter().zip(img.pixels()) {
                gw += g * x as f64;
                gb += g;
            }
            grad.weight[n] += gw as f32;
            grad.bias[n] += gb as f32;
        }
        Ok(())
    }

    fn zeroed(&self) -> Self {
        Self::zeros(self.weight.len())
    }

    fn param_slices(&self) -> Vec<&[f32]> {
        vec![&self.weight, &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.weight, &mut self.bias]
    }
}
