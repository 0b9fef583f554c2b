//! 3D U-Net: encoder with strided-conv downsampling, decoder with
//! transposed-conv upsampling and skip concatenation, 1x1x1 projection head.
//!
//! Channels double per encoder stage. Every conv (except the head) is
//! followed by optional instance norm and the configured nonlinearity.

use ndarray::{concatenate, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{Conv3d, ConvTranspose3d};
use super::norm::{InstanceNorm, NormCache};
use super::{Activation, Gradients, Scalar};
use crate::error::{Error, Result};

#[derive(Debug)]
struct ConvBlock<F> {
    conv: Conv3d<F>,
    norm: Option<InstanceNorm<F>>,
    act: Activation,
    param_base: usize,
}

struct BlockCache<F> {
    x: Array4<F>,
    norm: Option<NormCache<F>>,
    out: Array4<F>,
}

fn pair_mut<F>(slots: &mut [Vec<F>], i: usize) -> (&mut [F], &mut [F]) {
    let (a, b) = slots.split_at_mut(i + 1);
    (a[i].as_mut_slice(), b[0].as_mut_slice())
}

impl<F: Scalar> ConvBlock<F> {
    fn forward(&self, x: Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let y = self.conv.forward(&x.view());
        let (mut out, norm_cache) = match &self.norm {
            Some(n) => {
                let (y2, c) = n.forward(&y.view());
                (y2, Some(c))
            }
            None => (y, None),
        };
        self.act.apply(&mut out);
        (out.clone(), BlockCache { x, norm: norm_cache, out })
    }

    fn backward(&self, cache: &BlockCache<F>, mut dy: Array4<F>, grads: &mut Gradients<F>) -> Array4<F> {
        self.act.backward(&cache.out, &mut dy);
        let d_pre = match (&self.norm, &cache.norm) {
            (Some(n), Some(nc)) => {
                let (dg, db) = pair_mut(&mut grads.slots, self.param_base + 2);
                n.backward(nc, &dy.view(), dg, db)
            }
            _ => dy,
        };
        let (dw, db) = pair_mut(&mut grads.slots, self.param_base);
        self.conv.backward(&cache.x.view(), &d_pre.view(), dw, db)
    }

    fn n_slots(&self) -> usize {
        if self.norm.is_some() {
            4
        } else {
            2
        }
    }
}

#[derive(Debug)]
struct UpBlock<F> {
    up: ConvTranspose3d<F>,
    param_base: usize,
}

#[derive(Debug)]
struct DecStage<F> {
    up: UpBlock<F>,
    blocks: Vec<ConvBlock<F>>,
}

struct DecCache<F> {
    up_x: Array4<F>,
    blocks: Vec<BlockCache<F>>,
}

/// Activations recorded by one item's forward pass.
pub struct Tape<F> {
    enc: Vec<Vec<BlockCache<F>>>,
    dec: Vec<DecCache<F>>,
    head_x: Array4<F>,
}

#[derive(Debug)]
pub struct UNet<F> {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    enc: Vec<Vec<ConvBlock<F>>>,
    dec: Vec<DecStage<F>>,
    head: Conv3d<F>,
    head_base: usize,
    n_slots: usize,
}

impl<F: Scalar> UNet<F> {
    /// Build and deterministically initialize (He-normal conv weights).
    pub fn init(
        in_channels: usize,
        num_classes: usize,
        depth: usize,
        base_filters: usize,
        use_norm: bool,
        act: Activation,
        seed: u64,
    ) -> Self {
        assert!(depth >= 2, "depth must be >= 2");
        assert!(base_filters >= 1);
        let ch = |s: usize| base_filters << s;

        fn mk_block<F: Scalar>(
            next_base: &mut usize,
            use_norm: bool,
            act: Activation,
            c_in: usize,
            c_out: usize,
            stride: usize,
        ) -> ConvBlock<F> {
            let b = ConvBlock {
                conv: Conv3d::new(c_in, c_out, 3, stride, 1),
                norm: use_norm.then(|| InstanceNorm::new(c_out)),
                act,
                param_base: *next_base,
            };
            *next_base += b.n_slots();
            b
        }
        let mut next_base = 0usize;

        let mut enc = Vec::new();
        for s in 0..depth {
            let mut blocks = Vec::new();
            if s == 0 {
                blocks.push(mk_block(&mut next_base, use_norm, act, in_channels, ch(0), 1));
                blocks.push(mk_block(&mut next_base, use_norm, act, ch(0), ch(0), 1));
            } else {
                blocks.push(mk_block(&mut next_base, use_norm, act, ch(s - 1), ch(s), 2));
                blocks.push(mk_block(&mut next_base, use_norm, act, ch(s), ch(s), 1));
            }
            enc.push(blocks);
        }

        let mut dec = Vec::new();
        for s in (0..depth - 1).rev() {
            let up = UpBlock {
                up: ConvTranspose3d::new(ch(s + 1), ch(s)),
                param_base: next_base,
            };
            next_base += 2;
            let blocks = vec![
                mk_block(&mut next_base, use_norm, act, 2 * ch(s), ch(s), 1),
                mk_block(&mut next_base, use_norm, act, ch(s), ch(s), 1),
            ];
            dec.push(DecStage { up, blocks });
        }

        let head = Conv3d::new(ch(0), num_classes, 1, 1, 0);
        let head_base = next_base;
        next_base += 2;

        let mut net = Self {
            in_channels,
            num_classes,
            depth,
            base_filters,
            enc,
            dec,
            head,
            head_base,
            n_slots: next_base,
        };
        net.init_params(seed);
        net
    }

    fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let fill_conv = |c: &mut Conv3d<F>, rng: &mut ChaCha20Rng| {
            let sh = c.weight.shape();
            let fan_in = sh[1] * sh[2] * sh[3] * sh[4];
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
            for w in c.weight.iter_mut() {
                *w = F::f(normal.sample(rng));
            }
            c.bias.fill(F::zero());
        };
        for stage in &mut self.enc {
            for b in stage.iter_mut() {
                fill_conv(&mut b.conv, &mut rng);
            }
        }
        for d in &mut self.dec {
            let sh = d.up.up.weight.shape();
            let fan_in = sh[0] * 8;
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
            for w in d.up.up.weight.iter_mut() {
                *w = F::f(normal.sample(&mut rng));
            }
            d.up.up.bias.fill(F::zero());
            for b in d.blocks.iter_mut() {
                fill_conv(&mut b.conv, &mut rng);
            }
        }
        fill_conv(&mut self.head, &mut rng);
    }

    /// Parameter element counts in registry order.
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.n_slots);
        let push_block = |sizes: &mut Vec<usize>, b: &ConvBlock<F>| {
            sizes.extend(b.conv.param_sizes());
            if let Some(n) = &b.norm {
                sizes.extend(n.param_sizes());
            }
        };
        for stage in &self.enc {
            for b in stage {
                push_block(&mut sizes, b);
            }
        }
        for d in &self.dec {
            sizes.extend(d.up.up.param_sizes());
            for b in &d.blocks {
                push_block(&mut sizes, b);
            }
        }
        sizes.extend(self.head.param_sizes());
        sizes
    }

    /// Names matching `param_sizes` order (for bundle sidecars).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let push_block = |names: &mut Vec<String>, prefix: &str, has_norm: bool| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
            if has_norm {
                names.push(format!("{prefix}.norm.gamma"));
                names.push(format!("{prefix}.norm.beta"));
            }
        };
        for (s, stage) in self.enc.iter().enumerate() {
            for (i, b) in stage.iter().enumerate() {
                push_block(&mut names, &format!("enc{s}.conv{i}"), b.norm.is_some());
            }
        }
        for (i, d) in self.dec.iter().enumerate() {
            let s = self.depth - 2 - i;
            let _ = i;
            names.push(format!("dec{s}.up.weight"));
            names.push(format!("dec{s}.up.bias"));
            for (j, b) in d.blocks.iter().enumerate() {
                push_block(&mut names, &format!("dec{s}.conv{j}"), b.norm.is_some());
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Flat views of all parameters in registry order.
    pub fn params(&self) -> Vec<&[F]> {
        fn push_block<'a, F: Scalar>(out: &mut Vec<&'a [F]>, b: &'a ConvBlock<F>) {
            out.push(b.conv.weight.as_slice().unwrap());
            out.push(b.conv.bias.as_slice().unwrap());
            if let Some(n) = &b.norm {
                out.push(n.gamma.as_slice().unwrap());
                out.push(n.beta.as_slice().unwrap());
            }
        }
        let mut out: Vec<&[F]> = Vec::with_capacity(self.n_slots);
        for stage in &self.enc {
            for b in stage {
                push_block(&mut out, b);
            }
        }
        for d in &self.dec {
            out.push(d.up.up.weight.as_slice().unwrap());
            out.push(d.up.up.bias.as_slice().unwrap());
            for b in &d.blocks {
                push_block(&mut out, b);
            }
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }

    /// Flat mutable views of all parameters in registry order.
    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::with_capacity(self.n_slots);
        for stage in &mut self.enc {
            for b in stage.iter_mut() {
                out.push(b.conv.weight.as_slice_mut().unwrap());
                out.push(b.conv.bias.as_slice_mut().unwrap());
                if let Some(n) = &mut b.norm {
                    out.push(n.gamma.as_slice_mut().unwrap());
                    out.push(n.beta.as_slice_mut().unwrap());
                }
            }
        }
        for d in &mut self.dec {
            out.push(d.up.up.weight.as_slice_mut().unwrap());
            out.push(d.up.up.bias.as_slice_mut().unwrap());
            for b in d.blocks.iter_mut() {
                out.push(b.conv.weight.as_slice_mut().unwrap());
                out.push(b.conv.bias.as_slice_mut().unwrap());
                if let Some(n) = &mut b.norm {
                    out.push(n.gamma.as_slice_mut().unwrap());
                    out.push(n.beta.as_slice_mut().unwrap());
                }
            }
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_slice_mut().unwrap());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn zero_gradients(&self) -> Gradients<F> {
        Gradients::zeros(&self.param_sizes())
    }

    fn check_input(&self, x: &ArrayView4<F>) -> Result<()> {
        let sh = x.shape();
        if sh[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                sh[0], self.in_channels
            )));
        }
        let div = 1usize << (self.depth - 1);
        for (a, &d) in sh[1..].iter().enumerate() {
            if d == 0 || d % div != 0 {
                return Err(Error::Shape(format!(
                    "spatial dim {a} = {d} not divisible by 2^(depth-1) = {div}"
                )));
            }
        }
        Ok(())
    }

    /// Forward one item (channels, D, H, W) -> logits of the same spatial
    /// shape, plus the activation tape for backprop.
    pub fn forward_item(&self, x: ArrayView4<F>) -> Result<(Array4<F>, Tape<F>)> {
        self.check_input(&x)?;
        let mut enc_caches = Vec::with_capacity(self.depth);
        let mut skips: Vec<Array4<F>> = Vec::with_capacity(self.depth - 1);
        let mut cur = x.to_owned();
        for (s, stage) in self.enc.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.len());
            for b in stage {
                let (out, cache) = b.forward(cur);
                cur = out;
                caches.push(cache);
            }
            enc_caches.push(caches);
            if s < self.depth - 1 {
                skips.push(cur.clone());
            }
        }

        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for (i, d) in self.dec.iter().enumerate() {
            let s = self.depth - 2 - i;
            let up_out = d.up.up.forward(&cur.view());
            let cat = concatenate(Axis(0), &[up_out.view(), skips[s].view()])
                .expect("channel concat");
            let mut caches = Vec::with_capacity(d.blocks.len());
            let mut inner = cat;
            for b in &d.blocks {
                let (out, cache) = b.forward(inner);
                inner = out;
                caches.push(cache);
            }
            dec_caches.push(DecCache { up_x: cur, blocks: caches });
            cur = inner;
        }

        let logits = self.head.forward(&cur.view());
        Ok((
            logits,
            Tape { enc: enc_caches, dec: dec_caches, head_x: cur },
        ))
    }

    /// Forward without recording a tape (inference).
    pub fn forward_item_no_tape(&self, x: ArrayView4<F>) -> Result<Array4<F>> {
        // The tape is dropped immediately; peak memory is one item's tape.
        self.forward_item(x).map(|(logits, _)| logits)
    }

    /// Backpropagate one item's loss gradient, accumulating into `grads`.
    pub fn backward_item(&self, tape: &Tape<F>, dlogits: ArrayView4<F>, grads: &mut Gradients<F>) {
        let (dw, db) = pair_mut(&mut grads.slots, self.head_base);
        let mut dcur = self
            .head
            .backward(&tape.head_x.view(), &dlogits.view(), dw, db);

        // Decoder stages, reverse of processing order.
        let mut dskips: Vec<Option<Array4<F>>> = vec![None; self.depth - 1];
        for (i, d) in self.dec.iter().enumerate().rev() {
            let s = self.depth - 2 - i;
            let cache = &tape.dec[i];
            for (b, c) in d.blocks.iter().zip(cache.blocks.iter()).rev() {
                dcur = b.backward(c, dcur, grads);
            }
            // Split concat gradient: first ch(s) channels went through up.
            let c_up = d.up.up.weight.shape()[1];
            let dup = dcur.slice(ndarray::s![..c_up, .., .., ..]).to_owned();
            let dskip = dcur.slice(ndarray::s![c_up.., .., .., ..]).to_owned();
            dskips[s] = Some(dskip);
            let (dw, db) = pair_mut(&mut grads.slots, d.up.param_base);
            dcur = d.up.up.backward(&cache.up_x.view(), &dup.view(), dw, db);
        }

        // Encoder stages, deepest first; add skip gradients where they fork.
        for (s, stage) in self.enc.iter().enumerate().rev() {
            for (b, c) in stage.iter().zip(tape.enc[s].iter()).rev() {
                dcur = b.backward(c, dcur, grads);
            }
            if s > 0 {
                if let Some(dskip) = &dskips[s - 1] {
                    dcur += dskip;
                }
            }
        }
    }
}
