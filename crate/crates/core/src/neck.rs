//! Feature pyramid necks.
//!
//! Both variants share the top-down path:
//!
//! ```text
//! P_top = lateral(C_top)
//! P_i   = lateral(C_i) + up2x(P_{i+1})          (literal_topdown: up2x(lateral(C_{i+1})))
//! ```
//!
//! The bottom-up path differs:
//!
//! * PAFPN: `N_i = fuse(concat(down(N_{i-1}), P_i))`.
//! * DFPN: `N_i = fuse(concat(down(P_{i-1}), P_i, down^(i-j)(N_j) for every j < i))`.
//!
//! In both, `N_bottom = P_bottom`. Laterals are 1×1 convolutions to
//! `out_channels`, `fuse` is a 3×3 convolution back to `out_channels`, and
//! `down` is a 2×2 max-pool applied as many times as the level gap needs.
//!
//! The neck is stored as an explicit node graph. The same graph drives the
//! forward pass, the backward pass and the textual layer manifest, so
//! structural checks on the manifest describe exactly what runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::init::{linear_conv, named_rng};
use crate::params::{accumulate_conv, push_conv, push_conv_mut, ParamRef, Parameters};
use crate::tensor::{
    add, concat_channels, conv2d, conv2d_backward, downsample_maxpool2x,
    downsample_maxpool2x_backward, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward, ConvParams, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckKind {
    Pafpn,
    Dfpn,
}

impl NeckKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NeckKind::Pafpn => "pafpn",
            NeckKind::Dfpn => "dfpn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pafpn" => Some(NeckKind::Pafpn),
            "dfpn" => Some(NeckKind::Dfpn),
            _ => None,
        }
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeckConfig {
    pub kind: NeckKind,
    /// Contiguous, ascending pyramid levels.
    pub levels: Vec<u8>,
    pub out_channels: usize,
    pub literal_topdown: bool,
    /// DFPN only: `false` drops every `down(N_j)` input.
    pub dense_links: bool,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            kind: NeckKind::Dfpn,
            levels: vec![3, 4, 5],
            out_channels: 64,
            literal_topdown: false,
            dense_links: true,
        }
    }
}

impl NeckConfig {
    pub fn new(kind: NeckKind, levels: Vec<u8>, out_channels: usize) -> Self {
        Self {
            kind,
            levels,
            out_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Config(format!(
                "neck needs at least two levels, got {:?}",
                self.levels
            )));
        }
        if self.levels.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config(format!(
                "neck levels must be contiguous and ascending, got {:?}",
                self.levels
            )));
        }
        if self.levels[0] < 1 || *self.levels.last().unwrap() > 5 {
            return Err(Error::Config(format!(
                "neck levels must lie in 1..=5, got {:?}",
                self.levels
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("neck out_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeOp {
    Input,
    Lateral(usize),
    Upsample,
    Add,
    Maxpool,
    Concat,
    Fuse(usize),
    Alias,
}

impl NodeOp {
    fn label(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Lateral(_) => "conv1x1",
            NodeOp::Upsample => "upsample2x",
            NodeOp::Add => "add",
            NodeOp::Maxpool => "maxpool2x",
            NodeOp::Concat => "concat",
            NodeOp::Fuse(_) => "conv3x3",
            NodeOp::Alias => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub channels: usize,
    pub level: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub config: NeckConfig,
    pub convs: Vec<(String, ConvParams)>,
    pub nodes: Vec<Node>,
    inputs: BTreeMap<u8, usize>,
    p_nodes: BTreeMap<u8, usize>,
    n_nodes: BTreeMap<u8, usize>,
}

struct GraphBuilder {
    nodes: Vec<Node>,
    convs: Vec<(String, ConvParams)>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

impl GraphBuilder {
    fn push(&mut self, name: String, op: NodeOp, inputs: Vec<usize>, channels: usize, level: u8) -> usize {
        let id = self.nodes.len();
        self.by_name.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            op,
            inputs,
            channels,
            level,
        });
        id
    }

    fn conv(&mut self, name: String, in_c: usize, out_c: usize, k: usize) -> usize {
        let params = linear_conv(out_c, in_c, k, 1, &mut named_rng(self.seed, &name));
        self.convs.push((name, params));
        self.convs.len() - 1
    }

    /// `src` max-pooled down to `level`, reusing already-built pooling chains.
    fn down_to(&mut self, src: usize, level: u8) -> usize {
        let mut cur = src;
        while self.nodes[cur].level < level {
            let base = &self.nodes[src].name;
            let steps = self.nodes[cur].level + 1 - self.nodes[src].level;
            let name = format!("{base}_down{steps}");
            cur = match self.by_name.get(&name) {
                Some(&id) => id,
                None => {
                    let (c, l) = (self.nodes[cur].channels, self.nodes[cur].level + 1);
                    self.push(name, NodeOp::Maxpool, vec![cur], c, l)
                }
            };
        }
        cur
    }
}

/// Builds a neck whose inputs have the given channel count per level.
pub fn build_neck(config: &NeckConfig, in_channels: &BTreeMap<u8, usize>, seed: u64) -> Result<Neck> {
    config.validate()?;
    let oc = config.out_channels;
    let mut g = GraphBuilder {
        nodes: Vec::new(),
        convs: Vec::new(),
        by_name: HashMap::new(),
        seed,
    };
    let mut inputs = BTreeMap::new();
    let mut laterals = BTreeMap::new();
    for &l in &config.levels {
        let c = *in_channels.get(&l).ok_or_else(|| {
            Error::Config(format!("backbone does not export level {l}"))
        })?;
        let input = g.push(format!("C{l}"), NodeOp::Input, vec![], c, l);
        inputs.insert(l, input);
        let conv = g.conv(format!("neck.lateral{l}"), c, oc, 1);
        laterals.insert(l, g.push(format!("lateral{l}"), NodeOp::Lateral(conv), vec![input], oc, l));
    }

    let mut p_nodes = BTreeMap::new();
    let top = *config.levels.last().unwrap();
    p_nodes.insert(top, g.push(format!("P{top}"), NodeOp::Alias, vec![laterals[&top]], oc, top));
    for &l in config.levels.iter().rev().skip(1) {
        let source = if config.literal_topdown {
            laterals[&(l + 1)]
        } else {
            p_nodes[&(l + 1)]
        };
        let src_name = g.nodes[source].name.clone();
        let up = g.push(format!("{src_name}_up"), NodeOp::Upsample, vec![source], oc, l);
        p_nodes.insert(l, g.push(format!("P{l}"), NodeOp::Add, vec![laterals[&l], up], oc, l));
    }

    let mut n_nodes: BTreeMap<u8, usize> = BTreeMap::new();
    let bottom = config.levels[0];
    n_nodes.insert(bottom, g.push(format!("N{bottom}"), NodeOp::Alias, vec![p_nodes[&bottom]], oc, bottom));
    for &l in &config.levels[1..] {
        let mut parts = Vec::new();
        match config.kind {
            NeckKind::Pafpn => {
                parts.push(g.down_to(n_nodes[&(l - 1)], l));
                parts.push(p_nodes[&l]);
            }
            NeckKind::Dfpn => {
                parts.push(g.down_to(p_nodes[&(l - 1)], l));
                parts.push(p_nodes[&l]);
                if config.dense_links {
                    let earlier: Vec<usize> = n_nodes.values().copied().collect();
                    for j in earlier {
                        parts.push(g.down_to(j, l));
                    }
                }
            }
        }
        let width: usize = parts.iter().map(|&p| g.nodes[p].channels).sum();
        let cat = g.push(format!("N{l}_cat"), NodeOp::Concat, parts, width, l);
        let conv = g.conv(format!("neck.fuse{l}"), width, oc, 3);
        n_nodes.insert(l, g.push(format!("N{l}"), NodeOp::Fuse(conv), vec![cat], oc, l));
    }

    Ok(Neck {
        config: config.clone(),
        convs: g.convs,
        nodes: g.nodes,
        inputs,
        p_nodes,
        n_nodes,
    })
}

#[derive(Clone, Debug)]
pub struct PyramidMaps {
    pub p: BTreeMap<u8, Tensor>,
    pub n: BTreeMap<u8, Tensor>,
}

#[derive(Clone, Debug)]
pub struct NeckCache {
    values: Vec<Tensor>,
}

impl NeckCache {
    /// Inputs to every max-pool node, for tie detection.
    pub fn pooled_inputs<'a>(&'a self, neck: &'a Neck) -> impl Iterator<Item = &'a Tensor> + 'a {
        neck.nodes
            .iter()
            .filter(|n| n.op == NodeOp::Maxpool)
            .map(|n| &self.values[n.inputs[0]])
    }
}

impl Neck {
    pub fn levels(&self) -> &[u8] {
        &self.config.levels
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn fuse_conv(&self, level: u8) -> Option<&ConvParams> {
        let name = format!("neck.fuse{level}");
        self.convs.iter().find(|(n, _)| *n == name).map(|(_, p)| p)
    }

    pub fn forward_cached(&self, c: &BTreeMap<u8, Tensor>) -> Result<(PyramidMaps, NeckCache)> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
            let v = match node.op {
                NodeOp::Input => {
                    let t = c.get(&node.level).ok_or_else(|| {
                        Error::shape("neck", format!("missing input map C{}", node.level))
                    })?;
                    if t.dims4()?.1 != node.channels {
                        return Err(Error::shape(
                            "neck",
                            format!(
                                "C{} has {} channels, neck expects {}",
                                node.level,
                                t.shape()[1],
                                node.channels
                            ),
                        ));
                    }
                    t.clone()
                }
                NodeOp::Lateral(ci) | NodeOp::Fuse(ci) => conv2d(ins[0], &self.convs[ci].1)?,
                NodeOp::Upsample => upsample_nearest2x(ins[0])?,
                NodeOp::Add => add(ins[0], ins[1]).map_err(|_| {
                    Error::shape(
                        "neck",
                        format!(
                            "{}: lateral {:?} vs upsampled {:?}",
                            node.name,
                            ins[0].shape(),
                            ins[1].shape()
                        ),
                    )
                })?,
                NodeOp::Maxpool => downsample_maxpool2x(ins[0])?,
                NodeOp::Concat => concat_channels(&ins).map_err(|_| {
                    Error::shape(
                        "neck",
                        format!(
                            "{}: cannot concatenate {:?}",
                            node.name,
                            ins.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                        ),
                    )
                })?,
                NodeOp::Alias => ins[0].clone(),
            };
            values.push(v);
        }
        let p = self.p_nodes.iter().map(|(&l, &i)| (l, values[i].clone())).collect();
        let n = self.n_nodes.iter().map(|(&l, &i)| (l, values[i].clone())).collect();
        Ok((PyramidMaps { p, n }, NeckCache { values }))
    }

    pub fn forward(&self, c: &BTreeMap<u8, Tensor>) -> Result<PyramidMaps> {
        Ok(self.forward_cached(c)?.0)
    }

    /// Gradients w.r.t. the input maps given gradients w.r.t. the `N` maps.
    pub fn backward(
        &self,
        cache: &NeckCache,
        d_n: &BTreeMap<u8, Tensor>,
        acc: &mut Neck,
    ) -> Result<BTreeMap<u8, Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
            match slot {
                Some(t) => crate::tensor::add_assign(t, &g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }
        for (l, g) in d_n {
            let id = *self.n_nodes.get(l).ok_or_else(|| {
                Error::shape("neck backward", format!("no N{l} in this neck"))
            })?;
            accumulate(&mut grads[id], g.clone())?;
        }
        for (id, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = grads[id].take() else { continue };
            if node.op == NodeOp::Input {
                grads[id] = Some(g);
                continue;
            }
            let ins = &node.inputs;
            match node.op {
                NodeOp::Lateral(ci) | NodeOp::Fuse(ci) => {
                    let b = conv2d_backward(&cache.values[ins[0]], &self.convs[ci].1, &g)?;
                    accumulate_conv(&mut acc.convs[ci].1, &b.d_weights, &b.d_bias);
                    accumulate(&mut grads[ins[0]], b.d_input)?;
                }
                NodeOp::Upsample => {
                    accumulate(&mut grads[ins[0]], upsample_nearest2x_backward(&g)?)?;
                }
                NodeOp::Add => {
                    accumulate(&mut grads[ins[1]], g.clone())?;
                    accumulate(&mut grads[ins[0]], g)?;
                }
                NodeOp::Maxpool => {
                    let d = downsample_maxpool2x_backward(&cache.values[ins[0]], &g)?;
                    accumulate(&mut grads[ins[0]], d)?;
                }
                NodeOp::Concat => {
                    let sizes: Vec<usize> = ins.iter().map(|&i| self.nodes[i].channels).collect();
                    for (&i, part) in ins.iter().zip(split_channels(&g, &sizes)?) {
                        accumulate(&mut grads[i], part)?;
                    }
                }
                NodeOp::Alias => accumulate(&mut grads[ins[0]], g)?,
                NodeOp::Input => unreachable!(),
            }
        }
        let mut out = BTreeMap::new();
        for (&l, &id) in &self.inputs {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| cache.values[id].zeros_like());
            out.insert(l, g);
        }
        Ok(out)
    }

    /// Layer manifest: `name inputs=a,b op=... channels=C stride=S`.
    pub fn layer_manifest(&self) -> String {
        let mut s = String::new();
        for node in &self.nodes {
            let inputs = if node.inputs.is_empty() {
                "-".to_string()
            } else {
                node.inputs
                    .iter()
                    .map(|&i| self.nodes[i].name.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let op = match node.op {
                NodeOp::Lateral(ci) | NodeOp::Fuse(ci) => {
                    let w = self.convs[ci].1.weight.shape();
                    format!("{}[{}]", node.op.label(), w.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
                }
                _ => node.op.label().to_string(),
            };
            s.push_str(&format!(
                "{} inputs={} op={} channels={} stride={}\n",
                node.name,
                inputs,
                op,
                node.channels,
                1u32 << node.level
            ));
        }
        s
    }
}

impl Parameters for Neck {
    fn params<'a>(&'a self, out: &mut Vec<ParamRef<'a>>) {
        for (name, conv) in &self.convs {
            let level = name.chars().last().and_then(|c| c.to_digit(10)).map(|d| d as u8);
            push_conv(out, name, level, conv, false);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for (_, conv) in &mut self.convs {
            push_conv_mut(out, conv);
        }
    }
}

/// A parsed neck layer manifest, for structural checks independent of the
/// in-memory graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGraph {
    pub nodes: Vec<(String, Vec<String>, String)>,
}

impl LayerGraph {
    pub fn parse(manifest: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: "neck manifest".into(),
                line: i + 1,
                msg: msg.into(),
            };
            let mut fields = line.split_whitespace();
            let name = fields.next().ok_or_else(|| bad("empty line"))?.to_string();
            let mut inputs = None;
            let mut op = None;
            for f in fields {
                if let Some(v) = f.strip_prefix("inputs=") {
                    inputs = Some(if v == "-" {
                        vec![]
                    } else {
                        v.split(',').map(str::to_string).collect()
                    });
                } else if let Some(v) = f.strip_prefix("op=") {
                    op = Some(v.to_string());
                }
            }
            nodes.push((
                name,
                inputs.ok_or_else(|| bad("missing inputs="))?,
                op.ok_or_else(|| bad("missing op="))?,
            ));
        }
        Ok(Self { nodes })
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|(n, _, _)| n == name)
    }

    fn is_enhanced(name: &str) -> bool {
        name.len() == 2 && name.starts_with('N')
    }

    /// `N_j` maps with a path into `N_i` that does not pass through any
    /// other `N` map.
    pub fn direct_feeders(&self, target: &str) -> Vec<String> {
        let Some(start) = self.index(target) else {
            return vec![];
        };
        let mut found = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        let mut seen = vec![false; self.nodes.len()];
        let push_inputs = |i: usize, stack: &mut Vec<usize>| {
            for inp in &self.nodes[i].1 {
                if let Some(j) = self.index(inp) {
                    stack.push(j);
                }
            }
        };
        push_inputs(start, &mut stack);
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            let name = &self.nodes[i].0;
            if Self::is_enhanced(name) {
                found.push(name.clone());
                continue;
            }
            push_inputs(i, &mut stack);
        }
        found.sort();
        found
    }

    /// Structural expression of a node with identity nodes collapsed and
    /// names erased, so two graphs compute the same function iff their
    /// outputs have equal expressions.
    pub fn expression(&self, name: &str) -> String {
        let Some(i) = self.index(name) else {
            return format!("?{name}");
        };
        let (n, inputs, op) = &self.nodes[i];
        if op == "identity" {
            return self.expression(&inputs[0]);
        }
        if op == "input" {
            return n.clone();
        }
        let args: Vec<String> = inputs.iter().map(|s| self.expression(s)).collect();
        format!("{op}({})", args.join(","))
    }
}

/// Top-down path on its own: `laterals[l]` is the 1×1 convolution for
/// level `l`. Works for a single level, where `P = lateral(C)`.
pub fn build_topdown(
    c: &BTreeMap<u8, Tensor>,
    laterals: &BTreeMap<u8, ConvParams>,
    literal_topdown: bool,
) -> Result<BTreeMap<u8, Tensor>> {
    let mut lat = BTreeMap::new();
    for (&l, t) in c {
        let conv = laterals
            .get(&l)
            .ok_or_else(|| Error::shape("build_topdown", format!("no lateral conv for level {l}")))?;
        lat.insert(l, conv2d(t, conv)?);
    }
    let levels: Vec<u8> = lat.keys().copied().collect();
    if levels.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::shape("build_topdown", format!("levels {levels:?} are not contiguous")));
    }
    let mut p = BTreeMap::new();
    let Some(&top) = levels.last() else {
        return Ok(p);
    };
    p.insert(top, lat[&top].clone());
    for &l in levels.iter().rev().skip(1) {
        let above = if literal_topdown { &lat[&(l + 1)] } else { &p[&(l + 1)] };
        let up = upsample_nearest2x(above)?;
        let sum = add(&lat[&l], &up).map_err(|_| {
            Error::shape(
                "build_topdown",
                format!("lateral {:?} vs upsampled {:?} at level {l}", lat[&l].shape(), up.shape()),
            )
        })?;
        p.insert(l, sum);
    }
    Ok(p)
}

fn down_by(t: &Tensor, steps: u8) -> Result<Tensor> {
    let mut out = t.clone();
    for _ in 0..steps {
        out = downsample_maxpool2x(&out)?;
    }
    Ok(out)
}

/// Dense bottom-up path: `fuse[l]` is the 3×3 convolution producing `N_l`.
pub fn build_bottomup_dense(
    p: &BTreeMap<u8, Tensor>,
    fuse: &BTreeMap<u8, ConvParams>,
) -> Result<BTreeMap<u8, Tensor>> {
    bottom_up(p, fuse, true)
}

/// Plain path-aggregation bottom-up path.
pub fn build_pafpn(
    p: &BTreeMap<u8, Tensor>,
    fuse: &BTreeMap<u8, ConvParams>,
) -> Result<BTreeMap<u8, Tensor>> {
    bottom_up(p, fuse, false)
}

fn bottom_up(
    p: &BTreeMap<u8, Tensor>,
    fuse: &BTreeMap<u8, ConvParams>,
    dense: bool,
) -> Result<BTreeMap<u8, Tensor>> {
    let levels: Vec<u8> = p.keys().copied().collect();
    let mut n: BTreeMap<u8, Tensor> = BTreeMap::new();
    let Some(&bottom) = levels.first() else {
        return Ok(n);
    };
    n.insert(bottom, p[&bottom].clone());
    for &l in &levels[1..] {
        let conv = fuse
            .get(&l)
            .ok_or_else(|| Error::shape("bottom_up", format!("no fuse conv for level {l}")))?;
        let mut parts = Vec::new();
        if dense {
            parts.push(down_by(&p[&(l - 1)], 1)?);
            parts.push(p[&l].clone());
            for (&j, nj) in &n {
                parts.push(down_by(nj, l - j)?);
            }
        } else {
            parts.push(down_by(&n[&(l - 1)], 1)?);
            parts.push(p[&l].clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        n.insert(l, conv2d(&concat_channels(&refs)?, conv)?);
    }
    Ok(n)
}

impl Neck {
    fn convs_with_prefix(&self, prefix: &str) -> BTreeMap<u8, ConvParams> {
        self.convs
            .iter()
            .filter_map(|(name, c)| {
                let l = name.strip_prefix(prefix)?.parse().ok()?;
                Some((l, c.clone()))
            })
            .collect()
    }

    pub fn lateral_convs(&self) -> BTreeMap<u8, ConvParams> {
        self.convs_with_prefix("neck.lateral")
    }

    pub fn fuse_convs(&self) -> BTreeMap<u8, ConvParams> {
        self.convs_with_prefix("neck.fuse")
    }
}
