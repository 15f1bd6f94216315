//! The full detector: backbone, neck and head.

use std::collections::BTreeMap;

use crate::backbone::{build_backbone, Backbone, BackboneCache, BackboneConfig};
use crate::bbox::{BBox, Detection};
use crate::config::{format_list, KvFile};
use crate::detect::decode;
use crate::error::{Error, Result};
use crate::head::{build_head, Head, HeadCache, HeadConfig, HeadOutput};
use crate::loss::{assign_targets, loss_and_grad, LossConfig, LossValue, Targets};
use crate::neck::{build_neck, Neck, NeckCache, NeckConfig, NeckKind};
use crate::params::{ParamRef, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub num_classes: usize,
    pub cls_prior: Option<f64>,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            neck: NeckConfig::default(),
            num_classes: 6,
            cls_prior: Some(0.01),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            in_channels: self.neck.out_channels,
            levels: self.neck.levels.clone(),
            cls_prior: self.cls_prior,
        }
    }

    /// Consumes the model keys of `kv`, defaulting any that are absent.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let d = Self::default();
        let stem = kv.take_or("stem_channels", d.backbone.stem_channels)?;
        let widths = kv
            .take_list("stage_widths")?
            .unwrap_or_else(|| d.backbone.stages.iter().map(|s| s.channels).collect::<Vec<usize>>());
        let blocks: Vec<usize> = kv.take_list("stage_blocks")?.unwrap_or_else(|| vec![1]);
        let dc = kv.take_list("dc_stages")?.unwrap_or_else(|| d.backbone.dc_stages());
        let mut backbone = BackboneConfig::with_widths(stem, &widths, blocks.first().copied().unwrap_or(0), &dc)?;
        match blocks.len() {
            1 => {}
            n if n == backbone.stages.len() => {
                for (s, b) in backbone.stages.iter_mut().zip(&blocks) {
                    s.blocks = *b;
                }
            }
            n => {
                return Err(Error::Config(format!(
                    "stage_blocks needs 1 or {} values, got {n}",
                    backbone.stages.len()
                )))
            }
        }
        backbone.clamp_offsets = kv.take_or("clamp_offsets", d.backbone.clamp_offsets)?;
        backbone.export_c1 = kv.take_or("export_c1", d.backbone.export_c1)?;
        let kind = match kv.take_str("neck") {
            None => d.neck.kind,
            Some(s) => NeckKind::parse(&s)
                .ok_or_else(|| Error::Config(format!("unknown neck `{s}`, expected pafpn or dfpn")))?,
        };
        let neck = NeckConfig {
            kind,
            levels: kv.take_list("neck_levels")?.unwrap_or(d.neck.levels),
            out_channels: kv.take_or("neck_channels", d.neck.out_channels)?,
            literal_topdown: kv.take_or("literal_topdown", d.neck.literal_topdown)?,
            dense_links: kv.take_or("dense_links", d.neck.dense_links)?,
        };
        let cls_prior = match kv.take_str("cls_prior") {
            None => d.cls_prior,
            Some(s) if s == "none" => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("cls_prior: cannot parse `{s}`")))?,
            ),
        };
        let cfg = Self {
            backbone,
            neck,
            num_classes: kv.take_or("num_classes", d.num_classes)?,
            cls_prior,
            loss: LossConfig {
                cls_weight: kv.take_or("cls_weight", d.loss.cls_weight)?,
                box_weight: kv.take_or("box_weight", d.loss.box_weight)?,
                pos_weight: kv.take_or("pos_weight", d.loss.pos_weight)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let widths: Vec<usize> = b.stages.iter().map(|s| s.channels).collect();
        let blocks: Vec<usize> = b.stages.iter().map(|s| s.blocks).collect();
        let prior = self.cls_prior.map_or("none".to_string(), |p| p.to_string());
        format!(
            "stem_channels = {}\nstage_widths = {}\nstage_blocks = {}\ndc_stages = {}\n\
             clamp_offsets = {}\nexport_c1 = {}\nneck = {}\nneck_levels = {}\nneck_channels = {}\n\
             literal_topdown = {}\ndense_links = {}\nnum_classes = {}\ncls_prior = {prior}\n\
             cls_weight = {}\nbox_weight = {}\npos_weight = {}\n",
            b.stem_channels,
            format_list(&widths),
            format_list(&blocks),
            format_list(&b.dc_stages()),
            b.clamp_offsets,
            b.export_c1,
            self.neck.kind,
            format_list(&self.neck.levels),
            self.neck.out_channels,
            self.neck.literal_topdown,
            self.neck.dense_links,
            self.num_classes,
            self.loss.cls_weight,
            self.loss.box_weight,
            self.loss.pos_weight,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck.validate()?;
        self.head_config().validate()?;
        for &l in &self.neck.levels {
            if l == 1 && !self.backbone.export_c1 {
                return Err(Error::Config(
                    "neck level 1 requires the backbone to export C1".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

pub struct ForwardCache {
    pub backbone: BackboneCache,
    pub neck: NeckCache,
    pub head: HeadCache,
}

pub fn build_detector(config: &ModelConfig, seed: u64) -> Result<Detector> {
    config.validate()?;
    let backbone = build_backbone(&config.backbone, seed)?;
    let widths: BTreeMap<u8, usize> = config
        .neck
        .levels
        .iter()
        .filter_map(|&l| config.backbone.channels(l).map(|c| (l, c)))
        .collect();
    let neck = build_neck(&config.neck, &widths, seed)?;
    let head = build_head(&config.head_config(), seed)?;
    Ok(Detector {
        config: config.clone(),
        backbone,
        neck,
        head,
    })
}

impl Parameters for Detector {
    fn params<'a>(&'a self, out: &mut Vec<ParamRef<'a>>) {
        self.backbone.params(out);
        self.neck.params(out);
        self.head.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.backbone.params_mut(out);
        self.neck.params_mut(out);
        self.head.params_mut(out);
    }
}

impl Detector {
    pub fn forward_cached(&self, images: &Tensor) -> Result<(HeadOutput, ForwardCache)> {
        let (c, backbone) = self.backbone.forward_cached(images)?;
        let (maps, neck) = self.neck.forward_cached(&c)?;
        let (out, head) = self.head.forward_cached(&maps.n)?;
        Ok((out, ForwardCache { backbone, neck, head }))
    }

    pub fn forward(&self, images: &Tensor) -> Result<HeadOutput> {
        Ok(self.forward_cached(images)?.0)
    }

    /// Parameter gradients given gradients w.r.t. the head outputs.
    pub fn backward(&self, cache: &ForwardCache, d_out: &HeadOutput) -> Result<Detector> {
        let mut acc = self.zeroed();
        let d_n = self.head.backward(&cache.head, d_out, &mut acc.head)?;
        let d_c = self.neck.backward(&cache.neck, &d_n, &mut acc.neck)?;
        self.backbone.backward(&cache.backbone, &d_c, &mut acc.backbone)?;
        Ok(acc)
    }

    pub fn targets(&self, images: &Tensor, gts: &[Vec<BBox>]) -> Result<Targets> {
        let (b, _, h, w) = images.dims4()?;
        if gts.len() != b {
            return Err(Error::InvalidArgument(format!(
                "{} annotation lists for a batch of {b}",
                gts.len()
            )));
        }
        let grid = self
            .config
            .neck
            .levels
            .iter()
            .map(|&l| (l, (h >> l, w >> l)))
            .collect();
        assign_targets(gts, &grid, (h, w), self.config.num_classes)
    }

    pub fn loss(&self, images: &Tensor, gts: &[Vec<BBox>]) -> Result<LossValue> {
        let targets = self.targets(images, gts)?;
        let out = self.forward(images)?;
        Ok(loss_and_grad(&out, &targets, &self.config.loss)?.0)
    }

    /// Loss and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, images: &Tensor, gts: &[Vec<BBox>]) -> Result<(LossValue, Detector)> {
        let targets = self.targets(images, gts)?;
        let (out, cache) = self.forward_cached(images)?;
        let (loss, d_out) = loss_and_grad(&out, &targets, &self.config.loss)?;
        Ok((loss, self.backward(&cache, &d_out)?))
    }

    pub fn detect(&self, images: &Tensor, score_thresh: f64, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
        decode(&self.forward(images)?, score_thresh, iou_thresh)
    }
}
