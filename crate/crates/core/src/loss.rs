//! Composite segmentation loss: cross-entropy plus soft Dice.
//!
//! The soft Dice term is `1 - mean over foreground classes` of
//! `(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)` with `eps = 1e-5`; sums run
//! over every voxel of the field. Cross-entropy is a voxel mean. Scalar
//! accumulation is done in f64 regardless of the network precision.

use ndarray::{Array4, Array5};

use crate::nn::Scalar;

pub const DICE_EPS: f64 = 1e-5;

/// Loss weights (w_ce, w_ds); the default is the equal-weighted sum.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub ds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, ds: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if self.ce < 0.0 || self.ds < 0.0 || (self.ce == 0.0 && self.ds == 0.0) {
            return Err(crate::Error::Config(
                "loss weights must be >= 0 and not both zero".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value split into its components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub ds: f64,
}

/// Per-voxel softmax over the class axis (axis 0) of one item.
pub fn softmax_item<F: Scalar>(logits: &Array4<F>) -> Array4<F> {
    let sh = logits.raw_dim();
    let c = sh[0];
    let v = sh[1] * sh[2] * sh[3];
    let zs = logits.as_slice().expect("contiguous logits");
    let mut probs = Array4::<F>::zeros(sh);
    {
        let ps = probs.as_slice_mut().unwrap();
        for vi in 0..v {
            let mut m = F::neg_infinity();
            for ci in 0..c {
                m = m.max(zs[ci * v + vi]);
            }
            let mut sum = F::zero();
            for ci in 0..c {
                let e = (zs[ci * v + vi] - m).exp();
                ps[ci * v + vi] = e;
                sum += e;
            }
            for ci in 0..c {
                ps[ci * v + vi] = ps[ci * v + vi] / sum;
            }
        }
    }
    probs
}

/// Per-voxel softmax over the class axis (axis 1) of a batch.
pub fn softmax_batch<F: Scalar>(logits: &Array5<F>) -> Array5<F> {
    let mut out = Array5::<F>::zeros(logits.raw_dim());
    for (item, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        let p = softmax_item(&item.to_owned());
        dst.assign(&p);
    }
    out
}

/// Per-class dice sums (2-weighted overlap numerator terms).
struct DiceSums {
    pg: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
}

fn accumulate_dice_sums<F: Scalar>(probs: &[F], target: &[u16], c: usize, sums: &mut DiceSums) {
    let v = target.len();
    for ci in 0..c {
        let row = &probs[ci * v..(ci + 1) * v];
        let mut p_sum = 0.0;
        let mut pg_sum = 0.0;
        for (vi, &pv) in row.iter().enumerate() {
            let pv = pv.as_f64();
            p_sum += pv;
            if target[vi] as usize == ci {
                pg_sum += pv;
            }
        }
        sums.p[ci] += p_sum;
        sums.pg[ci] += pg_sum;
    }
    for &t in target.iter() {
        sums.g[t as usize] += 1.0;
    }
}

fn dice_loss_from_sums(sums: &DiceSums) -> f64 {
    let classes = sums.p.len();
    let fg = (classes - 1) as f64;
    let mut acc = 0.0;
    for ci in 1..classes {
        let num = 2.0 * sums.pg[ci] + DICE_EPS;
        let den = sums.p[ci] + sums.g[ci] + DICE_EPS;
        acc += num / den;
    }
    1.0 - acc / fg
}

/// Soft Dice loss over a batch of per-voxel class probabilities.
///
/// `probs` is (N, C, D, H, W) softmax output; `target` is (N, D, H, W) class
/// ids. Sums run over the entire field (batch and space together).
pub fn dice_loss<F: Scalar>(probs: &Array5<F>, target: &Array4<u16>) -> f64 {
    let sh = probs.shape();
    let c = sh[1];
    let mut sums = DiceSums { pg: vec![0.0; c], p: vec![0.0; c], g: vec![0.0; c] };
    for (item, tgt) in probs.outer_iter().zip(target.outer_iter()) {
        let item = item.to_owned();
        let tgt = tgt.to_owned();
        accumulate_dice_sums(
            item.as_slice().unwrap(),
            tgt.as_slice().unwrap(),
            c,
            &mut sums,
        );
    }
    dice_loss_from_sums(&sums)
}

/// Cross-entropy (voxel mean) over a batch of logits, via log-sum-exp.
pub fn cross_entropy<F: Scalar>(logits: &Array5<F>, target: &Array4<u16>) -> f64 {
    let sh = logits.shape();
    let c = sh[1];
    let v = sh[2] * sh[3] * sh[4];
    let mut acc = 0.0;
    let mut count = 0usize;
    for (item, tgt) in logits.outer_iter().zip(target.outer_iter()) {
        let item = item.to_owned();
        let zs = item.as_slice().unwrap();
        let tgt = tgt.to_owned();
        let ts = tgt.as_slice().unwrap();
        for vi in 0..v {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(zs[ci * v + vi].as_f64());
            }
            let mut lse = 0.0;
            for ci in 0..c {
                lse += (zs[ci * v + vi].as_f64() - m).exp();
            }
            let lse = m + lse.ln();
            acc += lse - zs[ts[vi] as usize * v + vi].as_f64();
            count += 1;
        }
    }
    acc / count as f64
}

/// Weighted CE + soft-Dice on a batch of logits (forward only).
pub fn composite_loss<F: Scalar>(
    logits: &Array5<F>,
    target: &Array4<u16>,
    weights: LossWeights,
) -> LossParts {
    let ce = cross_entropy(logits, target);
    let ds = dice_loss(&softmax_batch(logits), target);
    LossParts { total: weights.ce * ce + weights.ds * ds, ce, ds }
}

/// Loss and d(loss)/d(logits) for one item: (C, D, H, W) + (D, H, W) target.
pub fn composite_loss_grad_item<F: Scalar>(
    logits: &Array4<F>,
    target: &ndarray::Array3<u16>,
    weights: LossWeights,
) -> (LossParts, Array4<F>) {
    let sh = logits.shape();
    let c = sh[0];
    let v = sh[1] * sh[2] * sh[3];
    debug_assert_eq!(v, target.len());

    let probs = softmax_item(logits);
    let ps = probs.as_slice().unwrap();
    let ts = target.as_slice().expect("contiguous target");

    // CE from the probabilities (softmax_item subtracts the per-voxel max,
    // so ln(p) is evaluated on well-scaled values).
    let mut ce = 0.0;
    for (vi, &t) in ts.iter().enumerate() {
        ce -= ps[t as usize * v + vi].as_f64().max(1e-300).ln();
    }
    ce /= v as f64;

    let mut sums = DiceSums { pg: vec![0.0; c], p: vec![0.0; c], g: vec![0.0; c] };
    accumulate_dice_sums(ps, ts, c, &mut sums);
    let fg = (c - 1) as f64;
    let mut num = vec![0.0f64; c];
    let mut den = vec![0.0f64; c];
    let mut ds_acc = 0.0;
    for ci in 1..c {
        num[ci] = 2.0 * sums.pg[ci] + DICE_EPS;
        den[ci] = sums.p[ci] + sums.g[ci] + DICE_EPS;
        ds_acc += num[ci] / den[ci];
    }
    let ds = 1.0 - ds_acc / fg;

    // Gradient w.r.t. logits.
    //   CE: dz = (p - onehot) / V
    //   DS: dL/dp_cv = -(1/|F|) (2 g_cv den_c - num_c) / den_c^2  (c >= 1),
    //       chained through softmax: dz_kv = p_kv (dp_kv - sum_c dp_cv p_cv)
    let inv_v = 1.0 / v as f64;
    // Per-class constants of the dice gradient; g_cv only toggles the
    // 2*den_c/den_c^2 part at the target class.
    let mut base = vec![0.0f64; c]; // dp when g_cv = 0
    let mut hit = vec![0.0f64; c]; // dp when g_cv = 1
    for ci in 1..c {
        let d2 = den[ci] * den[ci];
        base[ci] = (1.0 / fg) * num[ci] / d2;
        hit[ci] = -(1.0 / fg) * (2.0 * den[ci] - num[ci]) / d2;
    }

    let mut dlogits = Array4::<F>::zeros(probs.raw_dim());
    {
        let dz = dlogits.as_slice_mut().unwrap();
        for vi in 0..v {
            let t = ts[vi] as usize;
            let mut dot = 0.0;
            for ci in 1..c {
                let dp = if ci == t { hit[ci] } else { base[ci] };
                dot += dp * ps[ci * v + vi].as_f64();
            }
            for ci in 0..c {
                let pv = ps[ci * v + vi].as_f64();
                let ce_term = (pv - if ci == t { 1.0 } else { 0.0 }) * inv_v;
                let dp = if ci == 0 {
                    0.0
                } else if ci == t {
                    hit[ci]
                } else {
                    base[ci]
                };
                let ds_term = pv * (dp - dot);
                dz[ci * v + vi] = F::f(weights.ce * ce_term + weights.ds * ds_term);
            }
        }
    }

    (
        LossParts { total: weights.ce * ce + weights.ds * ds, ce, ds },
        dlogits,
    )
}
