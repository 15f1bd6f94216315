//! Decoupled anchor-free head.
//!
//! Each pyramid level has its own pair of branches over `N_l`:
//!
//! ```text
//! cls: conv3x3 -> leaky -> conv1x1 -> num_classes logits
//! reg: conv3x3 -> leaky -> conv1x1 -> (t0, t1, t2, t3)
//! ```
//!
//! A cell at `(row, col)` on a `gh × gw` grid predicts the box
//! `cx = (col + σ(t0)) / gw`, `cy = (row + σ(t1)) / gh`, `w = e^t2`,
//! `h = e^t3`.

use std::collections::BTreeMap;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::init::{he_conv, linear_conv, named_rng};
use crate::params::{accumulate_conv, push_conv, push_conv_mut, ParamRef, Parameters};
use crate::tensor::{
    add, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, ConvParams, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub levels: Vec<u8>,
    /// Initial foreground probability encoded in the class biases. `None`
    /// leaves them at zero.
    pub cls_prior: Option<f64>,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 || self.levels.is_empty() {
            return Err(Error::Config(
                "head needs classes, channels and at least one level".into(),
            ));
        }
        if let Some(p) = self.cls_prior {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("cls_prior must be in (0,1), got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub stem: ConvParams,
    pub out: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelHead {
    pub level: u8,
    pub cls: Branch,
    pub reg: Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub levels: Vec<LevelHead>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    /// `(B, num_classes, h, w)`.
    pub cls_logits: Tensor,
    /// `(B, 4, h, w)`.
    pub box_reg: Tensor,
}

pub type HeadOutput = BTreeMap<u8, LevelOutput>;

/// Prediction layers start at this fraction of the variance-preserving scale so the
/// initial logits and box parameters sit near zero.
pub const OUT_INIT_SCALE: f64 = 0.01;

pub fn build_head(config: &HeadConfig, seed: u64) -> Result<Head> {
    config.validate()?;
    let c = config.in_channels;
    let branch = |prefix: String, out_c: usize| {
        let stem = he_conv(c, c, 3, 1, &mut named_rng(seed, &format!("{prefix}.stem")));
        let mut out = linear_conv(out_c, c, 1, 1, &mut named_rng(seed, &format!("{prefix}.out")));
        out.weight.scale(OUT_INIT_SCALE);
        Branch { stem, out }
    };
    let levels = config
        .levels
        .iter()
        .map(|&l| {
            let mut cls = branch(format!("head.p{l}.cls"), config.num_classes);
            if let Some(p) = config.cls_prior {
                cls.out.bias.fill((p / (1.0 - p)).ln());
            }
            LevelHead {
                level: l,
                cls,
                reg: branch(format!("head.p{l}.reg"), 4),
            }
        })
        .collect();
    Ok(Head {
        config: config.clone(),
        levels,
    })
}

impl Parameters for Head {
    fn params<'a>(&'a self, out: &mut Vec<ParamRef<'a>>) {
        for lh in &self.levels {
            let l = lh.level;
            for (name, b) in [("cls", &lh.cls), ("reg", &lh.reg)] {
                push_conv(out, &format!("head.p{l}.{name}.stem"), Some(l), &b.stem, false);
                push_conv(out, &format!("head.p{l}.{name}.out"), Some(l), &b.out, false);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for lh in &mut self.levels {
            for b in [&mut lh.cls, &mut lh.reg] {
                push_conv_mut(out, &mut b.stem);
                push_conv_mut(out, &mut b.out);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct BranchCache {
    pre: Tensor,
    hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    inputs: BTreeMap<u8, Tensor>,
    branches: BTreeMap<u8, (BranchCache, BranchCache)>,
}

impl HeadCache {
    pub fn pre_activations(&self) -> impl Iterator<Item = &Tensor> {
        self.branches.values().flat_map(|(a, b)| [&a.pre, &b.pre])
    }
}

fn branch_forward(b: &Branch, x: &Tensor) -> Result<(Tensor, BranchCache)> {
    let pre = conv2d(x, &b.stem)?;
    let hidden = leaky_relu(&pre);
    let out = conv2d(&hidden, &b.out)?;
    Ok((out, BranchCache { pre, hidden }))
}

fn branch_backward(
    b: &Branch,
    cache: &BranchCache,
    x: &Tensor,
    upstream: &Tensor,
    acc: &mut Branch,
) -> Result<Tensor> {
    let g_out = conv2d_backward(&cache.hidden, &b.out, upstream)?;
    accumulate_conv(&mut acc.out, &g_out.d_weights, &g_out.d_bias);
    let d_pre = leaky_relu_backward(&cache.pre, &g_out.d_input)?;
    let g_stem = conv2d_backward(x, &b.stem, &d_pre)?;
    accumulate_conv(&mut acc.stem, &g_stem.d_weights, &g_stem.d_bias);
    Ok(g_stem.d_input)
}

impl Head {
    pub fn forward_cached(&self, n: &BTreeMap<u8, Tensor>) -> Result<(HeadOutput, HeadCache)> {
        let mut out = HeadOutput::new();
        let mut cache = HeadCache {
            inputs: BTreeMap::new(),
            branches: BTreeMap::new(),
        };
        for lh in &self.levels {
            let x = n.get(&lh.level).ok_or_else(|| {
                Error::shape("head_forward", format!("missing N{} map", lh.level))
            })?;
            let (_, c, _, _) = x.dims4()?;
            if c != self.config.in_channels {
                return Err(Error::shape(
                    "head_forward",
                    format!(
                        "N{} has {c} channels, head expects {}",
                        lh.level, self.config.in_channels
                    ),
                ));
            }
            let (cls_logits, cc) = branch_forward(&lh.cls, x)?;
            let (box_reg, rc) = branch_forward(&lh.reg, x)?;
            out.insert(lh.level, LevelOutput { cls_logits, box_reg });
            cache.inputs.insert(lh.level, x.clone());
            cache.branches.insert(lh.level, (cc, rc));
        }
        Ok((out, cache))
    }

    pub fn forward(&self, n: &BTreeMap<u8, Tensor>) -> Result<HeadOutput> {
        Ok(self.forward_cached(n)?.0)
    }

    /// Gradients w.r.t. the `N` maps given gradients w.r.t. the outputs.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_out: &HeadOutput,
        acc: &mut Head,
    ) -> Result<BTreeMap<u8, Tensor>> {
        let mut d_n = BTreeMap::new();
        for (i, lh) in self.levels.iter().enumerate() {
            let l = lh.level;
            let g = d_out.get(&l).ok_or_else(|| {
                Error::shape("head_backward", format!("missing gradient for level {l}"))
            })?;
            let x = &cache.inputs[&l];
            let (cc, rc) = &cache.branches[&l];
            let acc_l = &mut acc.levels[i];
            let dc = branch_backward(&lh.cls, cc, x, &g.cls_logits, &mut acc_l.cls)?;
            let dr = branch_backward(&lh.reg, rc, x, &g.box_reg, &mut acc_l.reg)?;
            d_n.insert(l, add(&dc, &dr)?);
        }
        Ok(d_n)
    }
}

pub fn head_forward(head: &Head, n: &BTreeMap<u8, Tensor>) -> Result<HeadOutput> {
    head.forward(n)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LOGIT_CLAMP: f64 = 1e-12;

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Cell `(row, col)` containing the box center on a `gh × gw` grid.
pub fn cell_of(b: &BBox, gh: usize, gw: usize) -> (usize, usize) {
    let row = ((b.cy * gh as f64).floor().max(0.0) as usize).min(gh - 1);
    let col = ((b.cx * gw as f64).floor().max(0.0) as usize).min(gw - 1);
    (row, col)
}

/// In-cell center offsets and log sizes: `(σ(t0), σ(t1), t2, t3)` targets.
pub fn box_targets(b: &BBox, row: usize, col: usize, gh: usize, gw: usize) -> [f64; 4] {
    [
        b.cx * gw as f64 - col as f64,
        b.cy * gh as f64 - row as f64,
        b.w.ln(),
        b.h.ln(),
    ]
}

/// Raw regression outputs `(t0, t1, t2, t3)` that decode exactly to `b`.
pub fn encode_box(b: &BBox, row: usize, col: usize, gh: usize, gw: usize) -> [f64; 4] {
    let [ox, oy, lw, lh] = box_targets(b, row, col, gh, gw);
    [logit(ox), logit(oy), lw, lh]
}

pub fn decode_box(t: [f64; 4], row: usize, col: usize, gh: usize, gw: usize, class_id: usize) -> BBox {
    BBox::new(
        class_id,
        (col as f64 + sigmoid(t[0])) / gw as f64,
        (row as f64 + sigmoid(t[1])) / gh as f64,
        t[2].exp().min(1.0),
        t[3].exp().min(1.0),
    )
}
