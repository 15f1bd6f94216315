//! Named parameter enumeration, manifests and checkpoints.
//!
//! Models expose their tensors through [`Parameters`] in a fixed order. A
//! gradient or momentum buffer is just another instance of the same model
//! type with different values, so optimisers zip two enumerations.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, ConvParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    OffsetWeight,
    OffsetBias,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::OffsetWeight => "offset_weight",
            Role::OffsetBias => "offset_bias",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "weight" => Role::Weight,
            "bias" => Role::Bias,
            "offset_weight" => Role::OffsetWeight,
            "offset_bias" => Role::OffsetBias,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// Backbone stage (or pyramid level) the parameter belongs to.
    pub stage: Option<u8>,
}

impl fmt::Display for ParamInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = self
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let stage = self.stage.map_or("-".to_string(), |s| s.to_string());
        write!(f, "{} {} {} {}", self.name, shape, self.role.as_str(), stage)
    }
}

pub struct ParamRef<'a> {
    pub info: ParamInfo,
    pub value: &'a Tensor,
}

pub trait Parameters: Clone {
    /// Appends every parameter in a fixed order.
    fn params<'a>(&'a self, out: &mut Vec<ParamRef<'a>>);

    /// Same order as [`params`](Self::params).
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn param_list(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.params(&mut out);
        out
    }

    fn param_list_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.params_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.param_list().iter().map(|p| p.value.len()).sum()
    }

    fn manifest(&self) -> Manifest {
        Manifest(self.param_list().into_iter().map(|p| p.info).collect())
    }

    /// A copy with every parameter zeroed, used as a gradient accumulator.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.param_list_mut() {
            t.fill(0.0);
        }
        z
    }
}

pub(crate) fn push_conv<'a>(
    out: &mut Vec<ParamRef<'a>>,
    prefix: &str,
    stage: Option<u8>,
    conv: &'a ConvParams,
    offset: bool,
) {
    let (w_role, b_role) = if offset {
        (Role::OffsetWeight, Role::OffsetBias)
    } else {
        (Role::Weight, Role::Bias)
    };
    for (suffix, role, t) in [("weight", w_role, &conv.weight), ("bias", b_role, &conv.bias)] {
        out.push(ParamRef {
            info: ParamInfo {
                name: format!("{prefix}.{suffix}"),
                shape: t.shape().to_vec(),
                role,
                stage,
            },
            value: t,
        });
    }
}

pub(crate) fn push_conv_mut<'a>(out: &mut Vec<&'a mut Tensor>, conv: &'a mut ConvParams) {
    out.push(&mut conv.weight);
    out.push(&mut conv.bias);
}

/// Adds `d_weights` / `d_bias` into a gradient-accumulator conv.
pub(crate) fn accumulate_conv(acc: &mut ConvParams, d_weights: &Tensor, d_bias: &Tensor) {
    for (a, g) in acc.weight.data_mut().iter_mut().zip(d_weights.data()) {
        *a += g;
    }
    for (a, g) in acc.bias.data_mut().iter_mut().zip(d_bias.data()) {
        *a += g;
    }
}

/// Ordered parameter descriptions, one line each: `name shape role stage`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest(pub Vec<ParamInfo>);

impl Manifest {
    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamInfo> {
        self.0.iter().find(|p| p.name == name)
    }

    /// Entries present in only one side or differing in shape/role/stage.
    pub fn diff(&self, other: &Manifest) -> ManifestDiff {
        let mut d = ManifestDiff::default();
        for p in &self.0 {
            match other.get(&p.name) {
                None => d.only_left.push(p.name.clone()),
                Some(q) if q != p => d.changed.push(p.name.clone()),
                _ => {}
            }
        }
        for q in &other.0 {
            if self.get(&q.name).is_none() {
                d.only_right.push(q.name.clone());
            }
        }
        d
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|p| format!("{p}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: "manifest".into(),
                line: i + 1,
                msg: msg.into(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad("expected `name shape role stage`"));
            }
            let shape = fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad shape"))?;
            let role = Role::parse(fields[2]).ok_or_else(|| bad("unknown role"))?;
            let stage = match fields[3] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad("bad stage"))?),
            };
            entries.push(ParamInfo {
                name: fields[0].to_string(),
                shape,
                role,
                stage,
            });
        }
        Ok(Manifest(entries))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ManifestDiff {
    pub only_left: Vec<String>,
    pub only_right: Vec<String>,
    pub changed: Vec<String>,
}

impl ManifestDiff {
    pub fn is_empty(&self) -> bool {
        self.only_left.is_empty() && self.only_right.is_empty() && self.changed.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.only_left
            .iter()
            .chain(&self.only_right)
            .chain(&self.changed)
    }
}

fn param_file(name: &str) -> String {
    format!("{name}.dtns")
}

/// Writes `manifest.txt` plus one `DTNS` file per parameter into `dir/sub`.
pub fn save_params<P: Parameters>(model: &P, dir: &Path, sub: &str) -> Result<()> {
    let target = dir.join(sub);
    fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    for p in model.param_list() {
        write_tensor(target.join(param_file(&p.info.name)), p.value)?;
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, model.manifest().to_text()).map_err(|e| Error::io(&manifest, e))
}

/// Loads tensors saved by [`save_params`] into a model of identical layout.
pub fn load_params<P: Parameters>(model: &mut P, dir: &Path, sub: &str) -> Result<()> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let saved = Manifest::parse(&text)?;
    let expected = model.manifest();
    let diff = expected.diff(&saved);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint layout differs from model: {:?}",
            diff.all().collect::<Vec<_>>()
        )));
    }
    let names: Vec<String> = expected.0.iter().map(|p| p.name.clone()).collect();
    for (name, slot) in names.iter().zip(model.param_list_mut()) {
        let t = read_tensor(dir.join(sub).join(param_file(name)))?;
        if t.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "{name}: stored shape {:?} differs from model shape {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
