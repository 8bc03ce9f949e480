//! Convolution, max-pool and transposed-convolution layers with explicit
//! backward passes. Convolutions run as im2col followed by one gemm.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{gemm, FeatureMap, MatRef, Real};

/// Draws from N(0, std^2) truncated to two standard deviations.
pub(crate) fn truncated_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return T::from_f64_lossy(z * std);
        }
    }
}

/// Square convolution with stride 1 and size-preserving zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout x (cin * k * k)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernel required for same padding");
        Self {
            cin,
            cout,
            k,
            weight: vec![T::zero(); cout * cin * k * k],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64, bias: f64) {
        for w in &mut self.weight {
            *w = truncated_normal(rng, std);
        }
        self.bias.fill(T::from_f64_lossy(bias));
    }

    fn im2col(&self, x: &FeatureMap<T>) -> Vec<T> {
        let (h, w, k) = (x.h, x.w, self.k);
        let hw = h * w;
        let pad = (k / 2) as isize;
        let mut col = vec![T::zero(); self.cin * k * k * hw];
        for ci in 0..self.cin {
            let plane = &x.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        let sx0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], h: usize, w: usize) -> FeatureMap<T> {
        let k = self.k;
        let hw = h * w;
        let pad = (k / 2) as isize;
        let mut dx_map = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut dx_map.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[sy as usize * w + sx0..][..x1 - x0];
                        let src = &row[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
        dx_map
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.hw();
        let mut out = FeatureMap::zeros(self.cout, x.h, x.w);
        for (co, row) in out.data.chunks_mut(hw).enumerate() {
            row.fill(self.bias[co]);
        }
        let wmat = MatRef::new(&self.weight, self.cout, self.cin * self.k * self.k);
        if self.k == 1 {
            gemm(wmat, x.as_mat(), T::one(), &mut out.data);
        } else {
            let col = self.im2col(x);
            gemm(wmat, MatRef::new(&col, self.cin * self.k * self.k, hw), T::one(), &mut out.data);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grad: &mut Conv<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let hw = x.hw();
        let kk = self.cin * self.k * self.k;
        for (co, row) in dy.data.chunks(hw).enumerate() {
            let s = row.iter().fold(T::zero(), |a, &b| a + b);
            grad.bias[co] = grad.bias[co] + s;
        }
        let col_owned;
        let col: MatRef<'_, T> = if self.k == 1 {
            x.as_mat()
        } else {
            col_owned = self.im2col(x);
            MatRef::new(&col_owned, kk, hw)
        };
        // dW += dY * col^T
        gemm(dy.as_mat(), col.t(), T::one(), &mut grad.weight);
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); kk * hw];
        gemm(
            MatRef::new(&self.weight, self.cout, kk).t(),
            dy.as_mat(),
            T::zero(),
            &mut dcol,
        );
        if self.k == 1 {
            Some(FeatureMap {
                c: self.cin,
                h: x.h,
                w: x.w,
                data: dcol,
            })
        } else {
            Some(self.col2im(&dcol, x.h, x.w))
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 2x2 transposed convolution with stride 2: doubles the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv<T> {
    pub cin: usize,
    pub cout: usize,
    /// `(cout * 4) x cin`, row index `co * 4 + dy * 2 + dx`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Deconv<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![T::zero(); cout * 4 * cin],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64, bias: f64) {
        for w in &mut self.weight {
            *w = truncated_normal(rng, std);
        }
        self.bias.fill(T::from_f64_lossy(bias));
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.c, self.cin, "deconv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut tmp = vec![T::zero(); self.cout * 4 * hw];
        gemm(
            MatRef::new(&self.weight, self.cout * 4, self.cin),
            x.as_mat(),
            T::zero(),
            &mut tmp,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = FeatureMap::zeros(self.cout, oh, ow);
        for co in 0..self.cout {
            let b = self.bias[co];
            let dst = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
            for q in 0..4 {
                let (qy, qx) = (q / 2, q % 2);
                let src = &tmp[(co * 4 + q) * hw..][..hw];
                for y in 0..h {
                    let drow = &mut dst[(2 * y + qy) * ow..][..ow];
                    for x in 0..w {
                        drow[2 * x + qx] = src[y * w + x] + b;
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grad: &mut Deconv<T>,
    ) -> FeatureMap<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dtmp = vec![T::zero(); self.cout * 4 * hw];
        for co in 0..self.cout {
            let src = &dy.data[co * oh * ow..(co + 1) * oh * ow];
            grad.bias[co] = grad.bias[co] + src.iter().fold(T::zero(), |a, &b| a + b);
            for q in 0..4 {
                let (qy, qx) = (q / 2, q % 2);
                let dst = &mut dtmp[(co * 4 + q) * hw..][..hw];
                for y in 0..h {
                    let srow = &src[(2 * y + qy) * ow..][..ow];
                    for x in 0..w {
                        dst[y * w + x] = srow[2 * x + qx];
                    }
                }
            }
        }
        let dtmp_mat = MatRef::new(&dtmp, self.cout * 4, hw);
        gemm(dtmp_mat, x.as_mat().t(), T::one(), &mut grad.weight);
        let mut dx = FeatureMap::zeros(self.cin, h, w);
        gemm(
            MatRef::new(&self.weight, self.cout * 4, self.cin).t(),
            dtmp_mat,
            T::zero(),
            &mut dx.data,
        );
        dx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 2x2 max-pool with stride 2. Returns the pooled map and, per output, the
/// flat input index of the selected element.
pub fn maxpool2<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = FeatureMap::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(
    dy: &FeatureMap<T>,
    arg: &[u32],
    in_h: usize,
    in_w: usize,
) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(dy.c, in_h, in_w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] = dx.data[i as usize] + *g;
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut FeatureMap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the activation output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut FeatureMap<T>, out: &FeatureMap<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split<T: Real>(x: FeatureMap<T>, first: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let n = first * x.hw();
    let mut data = x.data;
    let tail = data.split_off(n);
    (
        FeatureMap {
            c: first,
            h: x.h,
            w: x.w,
            data,
        },
        FeatureMap {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: tail,
        },
    )
}
