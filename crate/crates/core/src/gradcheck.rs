//! Finite-difference self-check of every hand-written backward pass.
//!
//! Each check draws a small random case from the seed, redrawing while any
//! activation input, sampling coordinate or max-pool window sits within
//! `1e-4` of a kink, then compares the analytic gradient with central
//! differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, build_backbone, Backbone, BackboneConfig};
use crate::bbox::BBox;
use crate::deform::{dc_backward, dc_forward, dc_forward_with_offsets, make_dc_layer, OffsetField};
use crate::error::Result;
use crate::head::{build_head, Head, HeadConfig, HeadOutput, LevelOutput};
use crate::loss::{assign_targets, compute_loss, loss_and_grad, LossConfig, Targets};
use crate::neck::{build_neck, Neck, NeckConfig, NeckKind};
use crate::params::{Parameters, Role};
use crate::tensor::{
    bilinear_sample, bilinear_sample_grads, conv2d, conv2d_backward, finite_diff_grad, grad_error,
    ConvParams, GradError, Tensor,
};

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
const KINK: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// Operator under test: `conv`, `bilinear`, `deform-conv`, `backbone`,
    /// `dfpn` or `head-loss`.
    pub op: &'static str,
    /// Which gradient of the operator.
    pub part: String,
    pub error: GradError,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.within(REL_TOL)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    /// Operators with at least one failing gradient, in suite order.
    pub fn failing_ops(&self) -> Vec<&'static str> {
        let mut ops: Vec<&'static str> = Vec::new();
        for r in self.results.iter().filter(|r| !r.passed()) {
            if !ops.contains(&r.op) {
                ops.push(r.op);
            }
        }
        ops
    }

    pub fn max_rel(&self, op: &str) -> f64 {
        self.results
            .iter()
            .filter(|r| r.op == op)
            .map(|r| r.error.max_rel)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}\n", self.seed);
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<28} max_rel {:.3e}  max_abs {:.3e}  n {:>4}  {}",
                format!("{}.{}", r.op, r.part),
                r.error.max_rel,
                r.error.max_abs,
                r.error.count,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn full_check(analytic: &Tensor, at: &Tensor, f: impl Fn(&Tensor) -> f64) -> GradError {
    let numeric = finite_diff_grad(f, at, EPS);
    grad_error(analytic.data(), numeric.data())
}

fn probe_check(analytic: &Tensor, at: &Tensor, idx: &[usize], f: impl Fn(&Tensor) -> f64) -> GradError {
    let mut a = Vec::with_capacity(idx.len());
    let mut n = Vec::with_capacity(idx.len());
    let mut p = at.clone();
    for &i in idx {
        let x = at.data()[i];
        p.data_mut()[i] = x + EPS;
        let plus = f(&p);
        p.data_mut()[i] = x - EPS;
        let minus = f(&p);
        p.data_mut()[i] = x;
        n.push((plus - minus) / (2.0 * EPS));
        a.push(analytic.data()[i]);
    }
    grad_error(&a, &n)
}

fn near_integer(v: f64) -> bool {
    (v - v.round()).abs() < KINK
}

fn near_zero(t: &Tensor) -> bool {
    t.data().iter().any(|v| v.abs() < KINK)
}

fn pool_windows_separated(t: &Tensor) -> bool {
    let Ok((b, c, h, w)) = t.dims4() else {
        return false;
    };
    for bi in 0..b {
        for ci in 0..c {
            for y in (0..h - h % 2).step_by(2) {
                for x in (0..w - w % 2).step_by(2) {
                    let mut v = [
                        t.at4(bi, ci, y, x),
                        t.at4(bi, ci, y, x + 1),
                        t.at4(bi, ci, y + 1, x),
                        t.at4(bi, ci, y + 1, x + 1),
                    ];
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] - v[1] < KINK {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Probes `per_tensor` random entries of every parameter tensor.
fn param_checks<P: Parameters + Clone>(
    op: &'static str,
    model: &P,
    grads: &P,
    per_tensor: usize,
    r: &mut ChaCha8Rng,
    loss: impl Fn(&P) -> f64,
) -> Vec<CheckResult> {
    let mut by_role: BTreeMap<&'static str, GradError> = BTreeMap::new();
    let analytic: Vec<Tensor> = grads.param_list().iter().map(|p| p.value.clone()).collect();
    let infos: Vec<(Role, Tensor)> = model
        .param_list()
        .iter()
        .map(|p| (p.info.role, p.value.clone()))
        .collect();
    for (k, (role, at)) in infos.iter().enumerate() {
        let idx: Vec<usize> = (0..per_tensor.min(at.len()))
            .map(|_| r.gen_range(0..at.len()))
            .collect();
        let err = probe_check(&analytic[k], at, &idx, |t| {
            let mut m = model.clone();
            *m.param_list_mut()[k] = t.clone();
            loss(&m)
        });
        let slot = by_role.entry(role.as_str()).or_default();
        *slot = slot.merge(err);
    }
    by_role
        .into_iter()
        .map(|(role, error)| CheckResult {
            op,
            part: format!("params.{role}"),
            error,
        })
        .collect()
}

fn check_conv(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let mut r = rng(seed, 1 + stride as u64 * 10 + k as u64);
        let x = rand_tensor(&[2, 3, 7, 6], &mut r, 1.0);
        let params = ConvParams::new(
            rand_tensor(&[4, 3, k, k], &mut r, 1.0),
            rand_tensor(&[4], &mut r, 1.0),
            stride,
            padding,
        )?;
        let up = rand_tensor(conv2d(&x, &params)?.shape(), &mut r, 1.0);
        let g = conv2d_backward(&x, &params, &up)?;
        let tag = format!("k{k}s{stride}p{padding}");
        out.push(CheckResult {
            op: "conv",
            part: format!("{tag}.input"),
            error: full_check(&g.d_input, &x, |t| dot(&conv2d(t, &params).unwrap(), &up)),
        });
        out.push(CheckResult {
            op: "conv",
            part: format!("{tag}.weight"),
            error: full_check(&g.d_weights, &params.weight, |w| {
                let mut p = params.clone();
                p.weight = w.clone();
                dot(&conv2d(&x, &p).unwrap(), &up)
            }),
        });
        out.push(CheckResult {
            op: "conv",
            part: format!("{tag}.bias"),
            error: full_check(&g.d_bias, &params.bias, |b| {
                let mut p = params.clone();
                p.bias = b.clone();
                dot(&conv2d(&x, &p).unwrap(), &up)
            }),
        });
    }
    Ok(out)
}

fn check_bilinear(seed: u64) -> Vec<CheckResult> {
    let mut r = rng(seed, 2);
    let (h, w) = (5, 6);
    let map = rand_tensor(&[h, w], &mut r, 1.0);
    let mut coord = GradError::default();
    let mut values = GradError::default();
    let mut drawn = 0;
    while drawn < 12 {
        // includes positions whose neighbours fall outside the map
        let y = r.gen_range(-1.5..h as f64 + 0.5);
        let x = r.gen_range(-1.5..w as f64 + 0.5);
        if near_integer(y) || near_integer(x) {
            continue;
        }
        drawn += 1;
        let up = r.gen_range(-2.0..2.0);
        let g = bilinear_sample_grads(&map, y, x, up);
        let f = |yy: f64, xx: f64| up * bilinear_sample(&map, yy, xx);
        let ny = (f(y + EPS, x) - f(y - EPS, x)) / (2.0 * EPS);
        let nx = (f(y, x + EPS) - f(y, x - EPS)) / (2.0 * EPS);
        coord = coord.merge(grad_error(&[g.d_y, g.d_x], &[ny, nx]));
        let mut dense = map.zeros_like();
        for (i, v) in &g.d_map {
            dense.data_mut()[*i] += v;
        }
        values = values.merge(full_check(&dense, &map, |m| up * bilinear_sample(m, y, x)));
    }
    vec![
        CheckResult {
            op: "bilinear",
            part: "coords".into(),
            error: coord,
        },
        CheckResult {
            op: "bilinear",
            part: "map".into(),
            error: values,
        },
    ]
}

fn check_deform(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for stride in [1usize, 2] {
        let mut r = rng(seed, 3 + stride as u64);
        let (layer, x) = loop {
            let mut layer = make_dc_layer(2, 3, 3, stride, r.gen())?;
            layer.main.bias = rand_tensor(&[3], &mut r, 0.5);
            layer.offset_branch.weight = rand_tensor(layer.offset_branch.weight.shape(), &mut r, 0.4);
            layer.offset_branch.bias = rand_tensor(layer.offset_branch.bias.shape(), &mut r, 1.0);
            let x = rand_tensor(&[1, 2, 6, 5], &mut r, 1.0);
            let (_, off) = dc_forward(&x, &layer)?;
            // tap positions are integers, so the offset carries the fraction
            if !off.tensor().data().iter().any(|&v| near_integer(v)) {
                break (layer, x);
            }
        };
        let (y, off) = dc_forward(&x, &layer)?;
        let up = rand_tensor(y.shape(), &mut r, 1.0);
        let g = dc_backward(&x, &layer, &off, &up)?;
        let score = |l: &crate::deform::DeformConvLayer, input: &Tensor| dot(&dc_forward(input, l).unwrap().0, &up);
        let tag = format!("s{stride}");
        let mut push = |part: &str, error: GradError| {
            out.push(CheckResult {
                op: "deform-conv",
                part: format!("{tag}.{part}"),
                error,
            })
        };
        push("input", full_check(&g.d_input, &x, |t| score(&layer, t)));
        push(
            "weight",
            full_check(&g.d_weights, &layer.main.weight, |w| {
                let mut l = layer.clone();
                l.main.weight = w.clone();
                score(&l, &x)
            }),
        );
        push(
            "bias",
            full_check(&g.d_bias, &layer.main.bias, |b| {
                let mut l = layer.clone();
                l.main.bias = b.clone();
                score(&l, &x)
            }),
        );
        push(
            "offsets",
            full_check(&g.d_offsets, off.tensor(), |o| {
                let field = OffsetField::new(o.clone()).unwrap();
                dot(&dc_forward_with_offsets(&x, &layer.main, &field, None).unwrap(), &up)
            }),
        );
        push(
            "offset_weight",
            full_check(&g.d_offset_weights, &layer.offset_branch.weight, |w| {
                let mut l = layer.clone();
                l.offset_branch.weight = w.clone();
                score(&l, &x)
            }),
        );
        push(
            "offset_bias",
            full_check(&g.d_offset_bias, &layer.offset_branch.bias, |b| {
                let mut l = layer.clone();
                l.offset_branch.bias = b.clone();
                score(&l, &x)
            }),
        );
    }
    Ok(out)
}

fn smooth_backbone(seed: u64) -> Result<(Backbone, Tensor)> {
    let cfg = BackboneConfig::with_widths(4, &[4, 6, 6, 8], 1, &[4, 5])?;
    let mut r = rng(seed, 4);
    loop {
        let mut bb = build_backbone(&cfg, r.gen())?;
        let roles: Vec<Role> = bb.param_list().iter().map(|p| p.info.role).collect();
        for (t, role) in bb.param_list_mut().into_iter().zip(roles) {
            match role {
                Role::OffsetWeight => *t = rand_tensor(t.shape(), &mut r, 0.3),
                Role::Bias | Role::OffsetBias => *t = rand_tensor(t.shape(), &mut r, 0.5),
                Role::Weight => {}
            }
        }
        let img = rand_tensor(&[1, 3, 32, 32], &mut r, 1.0);
        let (_, cache) = bb.forward_cached(&img)?;
        let kink = cache.pre_activations().iter().any(|t| near_zero(t));
        let grid = cache
            .offset_fields()
            .iter()
            .any(|f| f.tensor().data().iter().any(|&v| near_integer(v)));
        if !kink && !grid {
            return Ok((bb, img));
        }
    }
}

fn check_backbone(seed: u64) -> Result<Vec<CheckResult>> {
    let (bb, img) = smooth_backbone(seed)?;
    let mut r = rng(seed, 5);
    let (maps, cache) = bb.forward_cached(&img)?;
    let d_maps: BTreeMap<u8, Tensor> = maps
        .iter()
        .map(|(&l, t)| (l, rand_tensor(t.shape(), &mut r, 1.0)))
        .collect();
    let mut acc = bb.zeroed();
    let d_img = bb.backward(&cache, &d_maps, &mut acc)?;
    let loss = |m: &Backbone, x: &Tensor| -> f64 {
        backbone_forward(m, x)
            .unwrap()
            .iter()
            .map(|(l, t)| dot(t, &d_maps[l]))
            .sum()
    };
    let idx: Vec<usize> = (0..24).map(|_| r.gen_range(0..img.len())).collect();
    let mut out = vec![CheckResult {
        op: "backbone",
        part: "image".into(),
        error: probe_check(&d_img, &img, &idx, |x| loss(&bb, x)),
    }];
    out.extend(param_checks("backbone", &bb, &acc, 3, &mut r, |m| loss(m, &img)));
    Ok(out)
}

fn smooth_neck(seed: u64) -> Result<(Neck, BTreeMap<u8, Tensor>)> {
    let levels = [3u8, 4, 5];
    let widths: BTreeMap<u8, usize> = levels.iter().map(|&l| (l, 3 + l as usize)).collect();
    let mut r = rng(seed, 6);
    loop {
        let mut neck = build_neck(&NeckConfig::new(NeckKind::Dfpn, levels.to_vec(), 3), &widths, r.gen())?;
        let roles: Vec<Role> = neck.param_list().iter().map(|p| p.info.role).collect();
        for (t, role) in neck.param_list_mut().into_iter().zip(roles) {
            if role == Role::Bias {
                *t = rand_tensor(t.shape(), &mut r, 0.5);
            }
        }
        let c: BTreeMap<u8, Tensor> = levels
            .iter()
            .map(|&l| (l, rand_tensor(&[1, widths[&l], 32 >> l, 32 >> l], &mut r, 1.0)))
            .collect();
        let (_, cache) = neck.forward_cached(&c)?;
        if cache.pooled_inputs(&neck).all(pool_windows_separated) {
            return Ok((neck, c));
        }
    }
}

fn check_dfpn(seed: u64) -> Result<Vec<CheckResult>> {
    let (neck, c) = smooth_neck(seed)?;
    let mut r = rng(seed, 7);
    let (out, cache) = neck.forward_cached(&c)?;
    let d_n: BTreeMap<u8, Tensor> = out
        .n
        .iter()
        .map(|(&l, t)| (l, rand_tensor(t.shape(), &mut r, 1.0)))
        .collect();
    let mut acc = neck.zeroed();
    let d_c = neck.backward(&cache, &d_n, &mut acc)?;
    let loss = |m: &Neck, inputs: &BTreeMap<u8, Tensor>| -> f64 {
        let o = m.forward(inputs).unwrap();
        o.n.iter().map(|(l, t)| dot(t, &d_n[l])).sum()
    };
    let mut results = Vec::new();
    for (l, g) in &d_c {
        results.push(CheckResult {
            op: "dfpn",
            part: format!("C{l}"),
            error: full_check(g, &c[l], |x| {
                let mut cc = c.clone();
                cc.insert(*l, x.clone());
                loss(&neck, &cc)
            }),
        });
    }
    results.extend(param_checks("dfpn", &neck, &acc, 6, &mut r, |m| loss(m, &c)));
    Ok(results)
}

fn random_boxes(r: &mut ChaCha8Rng, nc: usize) -> Vec<BBox> {
    (0..r.gen_range(1..=2))
        .map(|_| {
            let w = r.gen_range(0.1..0.6);
            let h = r.gen_range(0.1..0.6);
            let cx = r.gen_range(w / 2.0..1.0 - w / 2.0);
            let cy = r.gen_range(h / 2.0..1.0 - h / 2.0);
            BBox::new(r.gen_range(0..nc), cx, cy, w, h)
        })
        .collect()
}

fn smooth_head(seed: u64) -> Result<(Head, BTreeMap<u8, Tensor>, Targets)> {
    let levels = [3u8, 4];
    let (c, nc, side) = (3usize, 2usize, 32usize);
    let mut r = rng(seed, 8);
    loop {
        let cfg = HeadConfig {
            num_classes: nc,
            in_channels: c,
            levels: levels.to_vec(),
            cls_prior: None,
        };
        let mut head = build_head(&cfg, r.gen())?;
        for t in head.param_list_mut() {
            if t.rank() == 1 {
                *t = rand_tensor(t.shape(), &mut r, 0.5);
            }
        }
        let n: BTreeMap<u8, Tensor> = levels
            .iter()
            .map(|&l| (l, rand_tensor(&[2, c, side >> l, side >> l], &mut r, 1.0)))
            .collect();
        let gts = vec![random_boxes(&mut r, nc), random_boxes(&mut r, nc)];
        let grid = levels.iter().map(|&l| (l, (side >> l, side >> l))).collect();
        let targets = assign_targets(&gts, &grid, (side, side), nc)?;
        let (_, cache) = head.forward_cached(&n)?;
        if !cache.pre_activations().any(near_zero) {
            return Ok((head, n, targets));
        }
    }
}

fn check_head_loss(seed: u64) -> Result<Vec<CheckResult>> {
    let (head, n, targets) = smooth_head(seed)?;
    let cfg = LossConfig::default();
    let mut r = rng(seed, 9);
    let (pred, cache) = head.forward_cached(&n)?;
    let (_, d_out) = loss_and_grad(&pred, &targets, &cfg)?;
    let mut results = Vec::new();

    // loss alone, w.r.t. every head output
    let mut out_err = GradError::default();
    for (l, g) in &d_out {
        for which in 0..2 {
            let pick = |o: &LevelOutput| if which == 0 { o.cls_logits.clone() } else { o.box_reg.clone() };
            out_err = out_err.merge(full_check(&pick(g), &pick(&pred[l]), |x| {
                let mut p: HeadOutput = pred.clone();
                let o = p.get_mut(l).unwrap();
                if which == 0 {
                    o.cls_logits = x.clone();
                } else {
                    o.box_reg = x.clone();
                }
                compute_loss(&p, &targets, &cfg).unwrap().total
            }));
        }
    }
    results.push(CheckResult {
        op: "head-loss",
        part: "outputs".into(),
        error: out_err,
    });

    let mut acc = head.zeroed();
    let d_n = head.backward(&cache, &d_out, &mut acc)?;
    let loss = |h: &Head, maps: &BTreeMap<u8, Tensor>| compute_loss(&h.forward(maps).unwrap(), &targets, &cfg).unwrap().total;
    for (l, g) in &d_n {
        results.push(CheckResult {
            op: "head-loss",
            part: format!("N{l}"),
            error: full_check(g, &n[l], |x| {
                let mut m = n.clone();
                m.insert(*l, x.clone());
                loss(&head, &m)
            }),
        });
    }
    results.extend(param_checks("head-loss", &head, &acc, 5, &mut r, |h| loss(h, &n)));
    Ok(results)
}

/// Runs every check for one seed.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut results = check_conv(seed)?;
    results.extend(check_bilinear(seed));
    results.extend(check_deform(seed)?);
    results.extend(check_backbone(seed)?);
    results.extend(check_dfpn(seed)?);
    results.extend(check_head_loss(seed)?);
    Ok(SuiteReport { seed, results })
}
