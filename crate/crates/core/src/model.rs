//! Network assembly: configurable multi-branch density estimators.
//!
//! Two small backbones are provided. `tiny_csrnet` is a 10-conv front-end in
//! four blocks (channels 16,16 | 32,32 | 48,48,48 | 64,64,64, max-pool after
//! the first three blocks) followed by a back-end of six dilated 3x3
//! convolutions (dilation 2, channels 64,64,64,32,16,8) named conv5_1..6,
//! with total stride 8. `tiny_mcnn` is a 6-conv stride-4 stack. A 1x1
//! convolution plus relu maps the final feature to a nonnegative
//! single-channel density map.
//!
//! The fusion variants share parameter layout wherever they share
//! structure: modality-specific branches walk the layer plan in lockstep,
//! and aggregation-distribution blocks are injected after named layers,
//! where the shared branch starts from a zero tensor.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::iadm::{
    self, BoundConv, BoundCross, BoundIadm, CrossBlock, GatingMode, IadmBlock,
};
use crate::tensor::{ConvParams, Graph, Tensor, VarId};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 1e-2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Backbone {
    TinyCsrnet,
    TinyMcnn,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::TinyCsrnet => "tiny_csrnet",
            Backbone::TinyMcnn => "tiny_mcnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny_csrnet" => Ok(Backbone::TinyCsrnet),
            "tiny_mcnn" => Ok(Backbone::TinyMcnn),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected tiny_csrnet or tiny_mcnn)"
            ))),
        }
    }

    /// Default layers after which fusion blocks are injected.
    pub fn default_injection_points(self) -> Vec<String> {
        let names: &[&str] = match self {
            Backbone::TinyCsrnet => &["conv1_2", "conv2_2", "conv3_3", "conv4_3"],
            Backbone::TinyMcnn => &["conv1_2", "conv2_2"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Fusion topology.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Variant {
    /// Specific branches + shared branch + full aggregation-distribution.
    Iadm,
    /// Single branch over channel-concatenated inputs.
    EarlyFusion,
    /// One full branch per modality, fused before the density head.
    LateFusion,
    /// Like `Iadm` but residuals pass ungated.
    NoGating,
    /// No shared branch; specific features refine each other directly.
    NoShared,
    /// Like `Iadm` but without the distribution transfer.
    NoDistribution,
    /// Single branch over one named modality.
    Unimodal(String),
}

impl Variant {
    pub fn as_config_string(&self) -> String {
        match self {
            Variant::Iadm => "iadm".into(),
            Variant::EarlyFusion => "early_fusion".into(),
            Variant::LateFusion => "late_fusion".into(),
            Variant::NoGating => "no_gating".into(),
            Variant::NoShared => "no_shared".into(),
            Variant::NoDistribution => "no_distribution".into(),
            Variant::Unimodal(m) => format!("unimodal:{m}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iadm" => Ok(Variant::Iadm),
            "early_fusion" => Ok(Variant::EarlyFusion),
            "late_fusion" => Ok(Variant::LateFusion),
            "no_gating" => Ok(Variant::NoGating),
            "no_shared" => Ok(Variant::NoShared),
            "no_distribution" => Ok(Variant::NoDistribution),
            other => {
                if let Some(m) = other.strip_prefix("unimodal:") {
                    Ok(Variant::Unimodal(m.to_string()))
                } else {
                    Err(Error::config(format!(
                        "unknown variant `{other}` (expected iadm, early_fusion, late_fusion, \
                         no_gating, no_shared, no_distribution or unimodal:<name>)"
                    )))
                }
            }
        }
    }

    /// Variants built around a zero-input shared branch.
    fn uses_shared_branch(&self) -> bool {
        matches!(self, Variant::Iadm | Variant::NoGating | Variant::NoDistribution)
    }
}

/// An input modality: a name and its channel count.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Modality {
    pub name: String,
    pub channels: usize,
}

impl Modality {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Modality {
            name: name.into(),
            channels,
        }
    }

    /// Parses `name` or `name:channels`; bare `rgb`, `thermal`, `depth` get
    /// their conventional channel counts.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some((name, ch)) = s.split_once(':') {
            let channels: usize = ch
                .parse()
                .map_err(|_| Error::config(format!("bad channel count in modality `{s}`")))?;
            if channels == 0 {
                return Err(Error::config(format!("modality `{s}` must have at least 1 channel")));
            }
            Ok(Modality::new(name, channels))
        } else {
            let channels = match s {
                "rgb" => 3,
                "thermal" | "depth" => 1,
                other => {
                    return Err(Error::config(format!(
                        "unknown modality `{other}`; write `{other}:<channels>`"
                    )))
                }
            };
            Ok(Modality::new(s, channels))
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.channels)
    }
}

/// Declarative description of a network to build.
#[derive(Clone, PartialEq, Debug)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    /// Fraction in (0, 1] applied to every layer's base channel count.
    pub channel_scale: f64,
    pub modalities: Vec<Modality>,
    pub pyramid_levels: usize,
    pub injection_points: Vec<String>,
    pub variant: Variant,
    pub gating_mode: GatingMode,
    pub seed: u64,
}

impl NetworkConfig {
    /// Two-modality RGB+thermal configuration with backbone defaults.
    pub fn rgbt(backbone: Backbone) -> Self {
        NetworkConfig {
            backbone,
            channel_scale: 0.7,
            modalities: vec![Modality::new("rgb", 3), Modality::new("thermal", 1)],
            pyramid_levels: 3,
            injection_points: backbone.default_injection_points(),
            variant: Variant::Iadm,
            gating_mode: GatingMode::Literal,
            seed: 0,
        }
    }

    pub fn to_kv(&self) -> String {
        let modalities: Vec<String> = self.modalities.iter().map(Modality::to_string).collect();
        format!(
            "backbone={}\nchannel_scale={}\nmodalities={}\npyramid_levels={}\ninjection_points={}\nvariant={}\ngating_mode={}\nseed={}\n",
            self.backbone.as_str(),
            self.channel_scale,
            modalities.join(","),
            self.pyramid_levels,
            self.injection_points.join(","),
            self.variant.as_config_string(),
            self.gating_mode.as_str(),
            self.seed,
        )
    }

    /// Applies `key=value` pairs onto this configuration.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            match k.as_str() {
                "backbone" => {
                    self.backbone = Backbone::parse(v)?;
                    if !pairs.iter().any(|(k, _)| k == "injection_points") {
                        self.injection_points = self.backbone.default_injection_points();
                    }
                }
                "channel_scale" => {
                    self.channel_scale = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad channel_scale `{v}`")))?
                }
                "modalities" => {
                    self.modalities = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(Modality::parse)
                        .collect::<Result<_>>()?
                }
                "pyramid_levels" => {
                    self.pyramid_levels = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad pyramid_levels `{v}`")))?
                }
                "injection_points" => {
                    self.injection_points = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.to_string())
                        .collect()
                }
                "variant" => self.variant = Variant::parse(v)?,
                "gating_mode" => self.gating_mode = GatingMode::parse(v)?,
                "seed" => {
                    self.seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad seed `{v}`")))?
                }
                other => return Err(Error::config(format!("unknown network config key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let backbone = pairs
            .iter()
            .find(|(k, _)| k == "backbone")
            .map(|(_, v)| Backbone::parse(v))
            .transpose()?
            .unwrap_or(Backbone::TinyCsrnet);
        let mut cfg = NetworkConfig::rgbt(backbone);
        cfg.apply_kv(pairs)?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                return Err(Error::Parse {
                    file: "<config>".into(),
                    line: i + 1,
                    msg: format!("expected key=value, found `{line}`"),
                })
            }
        }
    }
    Ok(out)
}

// Layer plans.

#[derive(Clone, Copy, Debug)]
enum PlanOp {
    Conv {
        out: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
    },
    Pool {
        window: usize,
    },
}

#[derive(Clone, Copy, Debug)]
struct PlanLayer {
    name: &'static str,
    op: PlanOp,
}

const fn conv(name: &'static str, out: usize) -> PlanLayer {
    PlanLayer {
        name,
        op: PlanOp::Conv {
            out,
            kernel: 3,
            padding: 1,
            dilation: 1,
        },
    }
}

const fn dconv(name: &'static str, out: usize) -> PlanLayer {
    PlanLayer {
        name,
        op: PlanOp::Conv {
            out,
            kernel: 3,
            padding: 2,
            dilation: 2,
        },
    }
}

const fn pool(name: &'static str) -> PlanLayer {
    PlanLayer {
        name,
        op: PlanOp::Pool { window: 2 },
    }
}

const TINY_CSRNET: &[PlanLayer] = &[
    conv("conv1_1", 16),
    conv("conv1_2", 16),
    pool("pool1"),
    conv("conv2_1", 32),
    conv("conv2_2", 32),
    pool("pool2"),
    conv("conv3_1", 48),
    conv("conv3_2", 48),
    conv("conv3_3", 48),
    pool("pool3"),
    conv("conv4_1", 64),
    conv("conv4_2", 64),
    conv("conv4_3", 64),
    dconv("conv5_1", 64),
    dconv("conv5_2", 64),
    dconv("conv5_3", 64),
    dconv("conv5_4", 32),
    dconv("conv5_5", 16),
    dconv("conv5_6", 8),
];

/// Index where the tiny_csrnet back-end begins.
const TINY_CSRNET_TRUNK: usize = 13;

const TINY_MCNN: &[PlanLayer] = &[
    PlanLayer {
        name: "conv1_1",
        op: PlanOp::Conv {
            out: 12,
            kernel: 5,
            padding: 2,
            dilation: 1,
        },
    },
    conv("conv1_2", 12),
    pool("pool1"),
    conv("conv2_1", 24),
    conv("conv2_2", 24),
    pool("pool2"),
    conv("conv3_1", 16),
    conv("conv3_2", 8),
];

const TINY_MCNN_TRUNK: usize = 6;

fn plan_of(backbone: Backbone) -> (&'static [PlanLayer], usize) {
    match backbone {
        Backbone::TinyCsrnet => (TINY_CSRNET, TINY_CSRNET_TRUNK),
        Backbone::TinyMcnn => (TINY_MCNN, TINY_MCNN_TRUNK),
    }
}

/// Conv layer names of a backbone, valid as injection points.
pub fn layer_names(backbone: Backbone) -> Vec<&'static str> {
    plan_of(backbone)
        .0
        .iter()
        .filter(|l| matches!(l.op, PlanOp::Conv { .. }))
        .map(|l| l.name)
        .collect()
}

// Built layers.

#[derive(Clone, Debug)]
enum LayerOp {
    Conv(ConvParams),
    Pool(usize),
}

#[derive(Clone, Debug)]
struct Layer {
    name: String,
    op: LayerOp,
}

#[derive(Clone, Debug, Default)]
struct Branch {
    layers: Vec<Layer>,
}

impl Branch {
    fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.op {
                LayerOp::Conv(p) => p.param_count(),
                LayerOp::Pool(_) => 0,
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
enum FusionBlock {
    Iadm(IadmBlock),
    Cross(CrossBlock),
}

impl FusionBlock {
    fn param_count(&self) -> usize {
        match self {
            FusionBlock::Iadm(b) => b.param_count(),
            FusionBlock::Cross(b) => b.param_count(),
        }
    }
}

/// A built network: branches, fusion blocks and the density head.
#[derive(Clone, Debug)]
pub struct Framework {
    cfg: NetworkConfig,
    /// One branch per modality, or a single branch for early fusion and
    /// unimodal variants.
    specific: Vec<Branch>,
    shared: Option<Branch>,
    /// One fusion block per injection point, in plan order.
    blocks: Vec<(String, FusionBlock)>,
    /// Back-end for `no_shared`, or the fusion convolutions of late fusion.
    trunk: Option<Branch>,
    head: ConvParams,
    /// Plan indices of the injection points, sorted.
    injection_indices: Vec<usize>,
}

fn scaled_channels(base: usize, scale: f64) -> usize {
    (base as f64 * scale).round() as usize
}

struct BranchBuilder<'r> {
    scale: f64,
    rng: &'r mut ChaCha8Rng,
}

impl BranchBuilder<'_> {
    /// Builds layers for `plan[range]`, starting from `in_channels`.
    /// Returns the branch and its output channel count.
    fn build(
        &mut self,
        plan: &[PlanLayer],
        range: std::ops::Range<usize>,
        mut in_channels: usize,
    ) -> Result<(Branch, usize)> {
        let mut layers = Vec::new();
        for pl in &plan[range] {
            match pl.op {
                PlanOp::Conv {
                    out,
                    kernel,
                    padding,
                    dilation,
                } => {
                    let out = scaled_channels(out, self.scale);
                    if out == 0 {
                        return Err(Error::config(format!(
                            "channel_scale {} reduces layer {} to zero channels",
                            self.scale, pl.name
                        )));
                    }
                    let p = ConvParams::gaussian(
                        out, in_channels, kernel, kernel, 1, padding, dilation, INIT_STD, true,
                        self.rng,
                    );
                    layers.push(Layer {
                        name: pl.name.to_string(),
                        op: LayerOp::Conv(p),
                    });
                    in_channels = out;
                }
                PlanOp::Pool { window } => layers.push(Layer {
                    name: pl.name.to_string(),
                    op: LayerOp::Pool(window),
                }),
            }
        }
        Ok((Branch { layers }, in_channels))
    }
}

/// Channel count after every plan prefix (ignores the branch input width,
/// which only affects the first convolution's input side).
fn channels_after(plan: &[PlanLayer], scale: f64, idx: usize) -> usize {
    let mut c = 0;
    for pl in &plan[..=idx] {
        if let PlanOp::Conv { out, .. } = pl.op {
            c = scaled_channels(out, scale);
        }
    }
    c
}

impl Framework {
    /// Deterministically constructs a network from its configuration.
    /// All weights are Gaussian(0, 1e-2), all biases zero.
    pub fn build(cfg: &NetworkConfig) -> Result<Framework> {
        if !(cfg.channel_scale > 0.0 && cfg.channel_scale <= 1.0) {
            return Err(Error::config(format!(
                "channel_scale must lie in (0, 1], found {}",
                cfg.channel_scale
            )));
        }
        if cfg.pyramid_levels == 0 {
            return Err(Error::config("pyramid_levels must be at least 1"));
        }
        if cfg.modalities.is_empty() {
            return Err(Error::config("at least one modality is required"));
        }
        let mut names = HashSet::new();
        for m in &cfg.modalities {
            if !names.insert(m.name.as_str()) {
                return Err(Error::config(format!("duplicate modality `{}`", m.name)));
            }
        }
        let (plan, trunk_start) = plan_of(cfg.backbone);

        // Resolve injection points to plan indices.
        let mut injection_indices = Vec::new();
        for name in &cfg.injection_points {
            let idx = plan
                .iter()
                .position(|l| l.name == name.as_str() && matches!(l.op, PlanOp::Conv { .. }))
                .ok_or_else(|| {
                    Error::config(format!(
                        "unknown injection point `{name}` for {}; valid layers: {}",
                        cfg.backbone.as_str(),
                        layer_names(cfg.backbone).join(", ")
                    ))
                })?;
            if injection_indices.contains(&idx) {
                return Err(Error::config(format!("duplicate injection point `{name}`")));
            }
            injection_indices.push(idx);
        }
        injection_indices.sort_unstable();

        let needs_blocks = cfg.variant.uses_shared_branch() || cfg.variant == Variant::NoShared;
        if needs_blocks && injection_indices.is_empty() {
            return Err(Error::config(format!(
                "variant {} requires at least one injection point",
                cfg.variant.as_config_string()
            )));
        }
        if cfg.variant == Variant::NoShared {
            if let Some(&bad) = injection_indices.iter().find(|&&i| i >= trunk_start) {
                return Err(Error::config(format!(
                    "variant no_shared only accepts injection points before the back-end; \
                     `{}` is too late (valid: {})",
                    plan[bad].name,
                    layer_names(cfg.backbone)
                        .into_iter()
                        .take_while(|&n| {
                            plan.iter().position(|l| l.name == n).unwrap() < trunk_start
                        })
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }
        if let Variant::Unimodal(name) = &cfg.variant {
            if !cfg.modalities.iter().any(|m| &m.name == name) {
                return Err(Error::config(format!(
                    "unimodal variant names `{name}` but configured modalities are: {}",
                    cfg.modalities
                        .iter()
                        .map(|m| m.name.clone())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = BranchBuilder {
            scale: cfg.channel_scale,
            rng: &mut rng,
        };
        let gating_on = cfg.variant != Variant::NoGating;
        let distribution_on = cfg.variant != Variant::NoDistribution;

        let mut specific = Vec::new();
        let mut shared = None;
        let mut blocks = Vec::new();
        let mut trunk = None;
        let head_in;

        match &cfg.variant {
            Variant::Unimodal(name) => {
                let m = cfg.modalities.iter().find(|m| &m.name == name).unwrap();
                let (branch, out) = b.build(plan, 0..plan.len(), m.channels)?;
                specific.push(branch);
                head_in = out;
            }
            Variant::EarlyFusion => {
                let in_c: usize = cfg.modalities.iter().map(|m| m.channels).sum();
                let (branch, out) = b.build(plan, 0..plan.len(), in_c)?;
                specific.push(branch);
                head_in = out;
            }
            Variant::LateFusion => {
                let mut out = 0;
                for m in &cfg.modalities {
                    let (branch, o) = b.build(plan, 0..plan.len(), m.channels)?;
                    specific.push(branch);
                    out = o;
                }
                // Fusion head: concatenation followed by two 3x3 convolutions.
                let cat = out * cfg.modalities.len();
                let f1 = ConvParams::gaussian(out, cat, 3, 3, 1, 1, 1, INIT_STD, true, b.rng);
                let f2 = ConvParams::gaussian(out, out, 3, 3, 1, 1, 1, INIT_STD, true, b.rng);
                trunk = Some(Branch {
                    layers: vec![
                        Layer {
                            name: "fuse_1".into(),
                            op: LayerOp::Conv(f1),
                        },
                        Layer {
                            name: "fuse_2".into(),
                            op: LayerOp::Conv(f2),
                        },
                    ],
                });
                head_in = out;
            }
            Variant::NoShared => {
                let mut front_out = 0;
                for m in &cfg.modalities {
                    let (branch, o) = b.build(plan, 0..trunk_start, m.channels)?;
                    specific.push(branch);
                    front_out = o;
                }
                for &idx in &injection_indices {
                    let c = channels_after(plan, cfg.channel_scale, idx);
                    let blk = CrossBlock::gaussian(
                        cfg.modalities.len(),
                        c,
                        cfg.pyramid_levels,
                        cfg.gating_mode,
                        gating_on,
                        INIT_STD,
                        b.rng,
                    );
                    blocks.push((plan[idx].name.to_string(), FusionBlock::Cross(blk)));
                }
                let cat = front_out * cfg.modalities.len();
                let (t, out) = b.build(plan, trunk_start..plan.len(), cat)?;
                trunk = Some(t);
                head_in = out;
            }
            Variant::Iadm | Variant::NoGating | Variant::NoDistribution => {
                let first_inj = injection_indices[0];
                let last_inj = *injection_indices.last().unwrap();
                for m in &cfg.modalities {
                    let (branch, _) = b.build(plan, 0..last_inj + 1, m.channels)?;
                    specific.push(branch);
                }
                let shared_in = channels_after(plan, cfg.channel_scale, first_inj);
                let (sh, out) = b.build(plan, first_inj + 1..plan.len(), shared_in)?;
                shared = Some(sh);
                for &idx in &injection_indices {
                    let c = channels_after(plan, cfg.channel_scale, idx);
                    let blk = IadmBlock::gaussian(
                        cfg.modalities.len(),
                        c,
                        cfg.pyramid_levels,
                        cfg.gating_mode,
                        gating_on,
                        distribution_on,
                        INIT_STD,
                        b.rng,
                    );
                    blocks.push((plan[idx].name.to_string(), FusionBlock::Iadm(blk)));
                }
                head_in = out;
            }
        }

        let head = ConvParams::gaussian(1, head_in, 1, 1, 1, 0, 1, INIT_STD, true, b.rng);

        let fw = Framework {
            cfg: cfg.clone(),
            specific,
            shared,
            blocks,
            trunk,
            head,
            injection_indices,
        };
        Ok(fw)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Total downsampling factor between input and density map.
    pub fn stride(&self) -> usize {
        let (plan, _) = plan_of(self.cfg.backbone);
        plan.iter()
            .map(|l| match l.op {
                PlanOp::Pool { window } => window,
                _ => 1,
            })
            .product()
    }

    pub fn num_fusion_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_branches(&self) -> usize {
        self.specific.len() + usize::from(self.shared.is_some())
    }

    pub fn has_shared_branch(&self) -> bool {
        self.shared.is_some()
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.specific.iter().map(Branch::param_count).sum::<usize>()
            + self.shared.as_ref().map_or(0, Branch::param_count)
            + self.blocks.iter().map(|(_, b)| b.param_count()).sum::<usize>()
            + self.trunk.as_ref().map_or(0, Branch::param_count)
            + self.head.param_count()
    }

    /// Visits every parameter tensor in declaration order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let visit_conv = |name: &str, p: &ConvParams, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{name}/weight"), &p.weights);
            if let Some(b) = &p.bias {
                f(&format!("{name}/bias"), b);
            }
        };
        for (branch, m) in self.specific.iter().zip(self.branch_labels()) {
            for l in &branch.layers {
                if let LayerOp::Conv(p) = &l.op {
                    visit_conv(&format!("{m}/{}", l.name), p, f);
                }
            }
        }
        if let Some(shared) = &self.shared {
            for l in &shared.layers {
                if let LayerOp::Conv(p) = &l.op {
                    visit_conv(&format!("shared/{}", l.name), p, f);
                }
            }
        }
        for (inj, blk) in &self.blocks {
            match blk {
                FusionBlock::Iadm(b) => {
                    for (e, m) in b.extractors_specific.iter().zip(&self.cfg.modalities) {
                        visit_conv(&format!("{inj}/extract_{}", m.name), &e.fuse, f);
                    }
                    visit_conv(&format!("{inj}/extract_shared"), &b.extractor_shared.fuse, f);
                    if let Some(e) = &b.extractor_shared_hat {
                        visit_conv(&format!("{inj}/extract_shared_hat"), &e.fuse, f);
                    }
                    if let Some(gates) = &b.gates_in {
                        for (g, m) in gates.iter().zip(&self.cfg.modalities) {
                            visit_conv(&format!("{inj}/gate_{}_to_shared", m.name), g, f);
                        }
                    }
                    if let Some(gates) = &b.gates_out {
                        for (g, m) in gates.iter().zip(&self.cfg.modalities) {
                            visit_conv(&format!("{inj}/gate_shared_to_{}", m.name), g, f);
                        }
                    }
                }
                FusionBlock::Cross(b) => {
                    for (e, m) in b.extractors.iter().zip(&self.cfg.modalities) {
                        visit_conv(&format!("{inj}/extract_{}", m.name), &e.fuse, f);
                    }
                    if let Some(gates) = &b.gates {
                        let mut k = 0;
                        for target in &self.cfg.modalities {
                            for source in &self.cfg.modalities {
                                if source.name == target.name {
                                    continue;
                                }
                                visit_conv(
                                    &format!("{inj}/gate_{}_to_{}", source.name, target.name),
                                    &gates[k],
                                    f,
                                );
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        if let Some(trunk) = &self.trunk {
            for l in &trunk.layers {
                if let LayerOp::Conv(p) = &l.op {
                    visit_conv(&format!("trunk/{}", l.name), p, f);
                }
            }
        }
        visit_conv("head", &self.head, f);
    }

    /// Mutable variant of [`Framework::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let labels = self.branch_labels();
        let modalities = self.cfg.modalities.clone();
        let visit_conv = |name: &str, p: &mut ConvParams, f: &mut dyn FnMut(&str, &mut Tensor)| {
            f(&format!("{name}/weight"), &mut p.weights);
            if let Some(b) = &mut p.bias {
                f(&format!("{name}/bias"), b);
            }
        };
        for (branch, m) in self.specific.iter_mut().zip(labels) {
            for l in &mut branch.layers {
                if let LayerOp::Conv(p) = &mut l.op {
                    visit_conv(&format!("{m}/{}", l.name), p, f);
                }
            }
        }
        if let Some(shared) = &mut self.shared {
            for l in &mut shared.layers {
                if let LayerOp::Conv(p) = &mut l.op {
                    visit_conv(&format!("shared/{}", l.name), p, f);
                }
            }
        }
        for (inj, blk) in &mut self.blocks {
            match blk {
                FusionBlock::Iadm(b) => {
                    for (e, m) in b.extractors_specific.iter_mut().zip(&modalities) {
                        visit_conv(&format!("{inj}/extract_{}", m.name), &mut e.fuse, f);
                    }
                    visit_conv(&format!("{inj}/extract_shared"), &mut b.extractor_shared.fuse, f);
                    if let Some(e) = &mut b.extractor_shared_hat {
                        visit_conv(&format!("{inj}/extract_shared_hat"), &mut e.fuse, f);
                    }
                    if let Some(gates) = &mut b.gates_in {
                        for (g, m) in gates.iter_mut().zip(&modalities) {
                            visit_conv(&format!("{inj}/gate_{}_to_shared", m.name), g, f);
                        }
                    }
                    if let Some(gates) = &mut b.gates_out {
                        for (g, m) in gates.iter_mut().zip(&modalities) {
                            visit_conv(&format!("{inj}/gate_shared_to_{}", m.name), g, f);
                        }
                    }
                }
                FusionBlock::Cross(b) => {
                    for (e, m) in b.extractors.iter_mut().zip(&modalities) {
                        visit_conv(&format!("{inj}/extract_{}", m.name), &mut e.fuse, f);
                    }
                    if let Some(gates) = &mut b.gates {
                        let mut k = 0;
                        for target in &modalities {
                            for source in &modalities {
                                if source.name == target.name {
                                    continue;
                                }
                                visit_conv(
                                    &format!("{inj}/gate_{}_to_{}", source.name, target.name),
                                    &mut gates[k],
                                    f,
                                );
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        if let Some(trunk) = &mut self.trunk {
            for l in &mut trunk.layers {
                if let LayerOp::Conv(p) = &mut l.op {
                    visit_conv(&format!("trunk/{}", l.name), p, f);
                }
            }
        }
        visit_conv("head", &mut self.head, f);
    }

    fn branch_labels(&self) -> Vec<String> {
        match &self.cfg.variant {
            Variant::Unimodal(name) => vec![name.clone()],
            Variant::EarlyFusion => vec!["early".into()],
            _ => self.cfg.modalities.iter().map(|m| m.name.clone()).collect(),
        }
    }

    /// Parameter tensor names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_string()));
        names
    }

    /// Records a forward pass on a fresh graph. Returns the graph, the
    /// density-map node, and the parameter leaves in declaration order.
    pub fn run(&self, inputs: &[Tensor]) -> Result<ForwardPass> {
        let expected: usize = self.cfg.modalities.len();
        if inputs.len() != expected {
            return Err(Error::usage(format!(
                "forward expects {expected} inputs ({}), received {}",
                self.cfg
                    .modalities
                    .iter()
                    .map(|m| m.name.clone())
                    .collect::<Vec<_>>()
                    .join(", "),
                inputs.len()
            )));
        }
        let s0 = inputs[0].shape();
        for (t, m) in inputs.iter().zip(&self.cfg.modalities) {
            let s = t.shape();
            if s.c != m.channels {
                return Err(Error::usage(format!(
                    "input for `{}` has {} channels, expected {}",
                    m.name, s.c, m.channels
                )));
            }
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::usage(format!(
                    "input shapes disagree: {} vs {}",
                    s, s0
                )));
            }
        }

        let mut g = Graph::new();
        let input_ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let mut param_ids = Vec::new();
        let density = self.record(&mut g, &mut param_ids, &input_ids)?;
        Ok(ForwardPass {
            graph: g,
            density,
            param_ids,
            input_ids,
        })
    }

    /// Forward pass returning only the density map.
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let fp = self.run(inputs)?;
        Ok(fp.graph.value(fp.density).clone())
    }

    fn record(&self, g: &mut Graph, param_ids: &mut Vec<VarId>, inputs: &[VarId]) -> Result<VarId> {
        let mut binder = Binder { g, ids: param_ids };
        // Bind every parameter in declaration order first, so gradients can
        // be read back positionally.
        let bound_specific: Vec<Vec<BoundLayer>> = self
            .specific
            .iter()
            .map(|br| binder.branch(br))
            .collect();
        let bound_shared = self.shared.as_ref().map(|br| binder.branch(br));
        let bound_blocks: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|(_, blk)| match blk {
                FusionBlock::Iadm(b) => BoundBlock::Iadm(iadm_bind(binder.g, binder.ids, b)),
                FusionBlock::Cross(b) => BoundBlock::Cross(cross_bind(binder.g, binder.ids, b)),
            })
            .collect();
        let bound_trunk = self.trunk.as_ref().map(|br| binder.branch(br));
        let bound_head = binder.conv(&self.head);

        let (plan, _) = plan_of(self.cfg.backbone);

        let features = match &self.cfg.variant {
            Variant::Unimodal(name) => {
                let idx = self
                    .cfg
                    .modalities
                    .iter()
                    .position(|m| &m.name == name)
                    .unwrap();
                let mut x = inputs[idx];
                for l in &bound_specific[0] {
                    x = l.apply(g, x)?;
                }
                x
            }
            Variant::EarlyFusion => {
                let mut x = if inputs.len() == 1 {
                    inputs[0]
                } else {
                    g.concat_channels(inputs)?
                };
                for l in &bound_specific[0] {
                    x = l.apply(g, x)?;
                }
                x
            }
            Variant::LateFusion => {
                let mut feats = Vec::with_capacity(inputs.len());
                for (branch, &input) in bound_specific.iter().zip(inputs) {
                    let mut x = input;
                    for l in branch {
                        x = l.apply(g, x)?;
                    }
                    feats.push(x);
                }
                let mut x = if feats.len() == 1 {
                    feats[0]
                } else {
                    g.concat_channels(&feats)?
                };
                for l in bound_trunk.as_ref().unwrap() {
                    x = l.apply(g, x)?;
                }
                x
            }
            Variant::NoShared => {
                let mut feats: Vec<VarId> = inputs.to_vec();
                let mut next_block = 0;
                for (pi, _) in plan.iter().enumerate().take(self.specific[0].layers.len()) {
                    for (bm, branch) in bound_specific.iter().enumerate() {
                        feats[bm] = branch[pi].apply(g, feats[bm])?;
                    }
                    if next_block < self.injection_indices.len()
                        && self.injection_indices[next_block] == pi
                    {
                        let BoundBlock::Cross(blk) = &bound_blocks[next_block] else {
                            unreachable!("no_shared builds cross blocks");
                        };
                        feats = iadm::cross_refine_on(g, &feats, blk)?;
                        next_block += 1;
                    }
                }
                let mut x = if feats.len() == 1 {
                    feats[0]
                } else {
                    g.concat_channels(&feats)?
                };
                for l in bound_trunk.as_ref().unwrap() {
                    x = l.apply(g, x)?;
                }
                x
            }
            Variant::Iadm | Variant::NoGating | Variant::NoDistribution => {
                let first_inj = self.injection_indices[0];
                let last_inj = *self.injection_indices.last().unwrap();
                let shared_branch = bound_shared.as_ref().unwrap();
                let mut feats: Vec<VarId> = inputs.to_vec();
                let mut shared: Option<VarId> = None;
                let mut next_block = 0;
                for pi in 0..plan.len() {
                    if pi <= last_inj {
                        for (bm, branch) in bound_specific.iter().enumerate() {
                            feats[bm] = branch[pi].apply(g, feats[bm])?;
                        }
                    }
                    if pi > first_inj {
                        let l = &shared_branch[pi - first_inj - 1];
                        shared = Some(l.apply(g, shared.expect("shared branch started"))?);
                    }
                    if next_block < self.injection_indices.len()
                        && self.injection_indices[next_block] == pi
                    {
                        // The shared branch starts as a zero tensor shaped
                        // like the specific features at the first injection.
                        let s = match shared {
                            Some(s) => s,
                            None => g.zeros(g.shape(feats[0])),
                        };
                        let BoundBlock::Iadm(blk) = &bound_blocks[next_block] else {
                            unreachable!("shared variants build iadm blocks");
                        };
                        let (s_new, f_new) = iadm::iadm_forward_on(g, s, &feats, blk)?;
                        shared = Some(s_new);
                        feats = f_new;
                        next_block += 1;
                    }
                }
                shared.expect("at least one injection point")
            }
        };

        let pre = bound_head.apply(g, features).map_err(|e| {
            Error::config(format!("density head: {e}"))
        })?;
        Ok(g.relu(pre))
    }

    /// Writes the checkpoint: a text manifest (config echo, seed, step,
    /// tensor count) followed by concatenated binary tensor dumps in
    /// declaration order.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        let mut count = 0usize;
        self.for_each_param(&mut |_, _| count += 1);
        write!(
            w,
            "IADMCKPT1\n{}step={}\ntensors={}\n",
            self.cfg.to_kv(),
            step,
            count
        )?;
        let mut res = Ok(());
        self.for_each_param(&mut |_, t| {
            if res.is_ok() {
                res = t.write_dump(&mut w);
            }
        });
        res
    }

    /// Rebuilds a network from a checkpoint file.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Framework, u64)> {
        let path = path.as_ref();
        let file_name = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != "IADMCKPT1" {
            return Err(Error::Parse {
                file: file_name,
                line: 1,
                msg: "not a checkpoint file (bad header)".into(),
            });
        }
        let mut pairs = Vec::new();
        let mut step = 0u64;
        let mut lineno = 1;
        let tensors = loop {
            line.clear();
            lineno += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse {
                    file: file_name,
                    line: lineno,
                    msg: "unexpected end of manifest".into(),
                });
            }
            let trimmed = line.trim_end();
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(Error::Parse {
                    file: file_name,
                    line: lineno,
                    msg: format!("expected key=value, found `{trimmed}`"),
                });
            };
            match k {
                "step" => {
                    step = v.parse().map_err(|_| Error::Parse {
                        file: file_name.clone(),
                        line: lineno,
                        msg: format!("bad step `{v}`"),
                    })?
                }
                "tensors" => {
                    break v.parse::<usize>().map_err(|_| Error::Parse {
                        file: file_name.clone(),
                        line: lineno,
                        msg: format!("bad tensor count `{v}`"),
                    })?;
                }
                _ => pairs.push((k.to_string(), v.to_string())),
            }
        };
        let cfg = NetworkConfig::from_kv(&pairs)?;
        let mut fw = Framework::build(&cfg)?;

        let mut count = 0usize;
        fw.for_each_param(&mut |_, _| count += 1);
        if count != tensors {
            return Err(Error::config(format!(
                "checkpoint/config mismatch: manifest declares {tensors} tensors, \
                 the configured model has {count}"
            )));
        }
        let mut loaded = Vec::with_capacity(tensors);
        for _ in 0..tensors {
            loaded.push(Tensor::read_dump(&mut r)?);
        }
        let mut i = 0;
        let mut res = Ok(());
        fw.for_each_param_mut(&mut |name, t| {
            if res.is_ok() {
                if loaded[i].shape() != t.shape() {
                    res = Err(Error::config(format!(
                        "checkpoint/config mismatch at `{name}`: checkpoint shape {}, model shape {}",
                        loaded[i].shape(),
                        t.shape()
                    )));
                } else {
                    *t = loaded[i].clone();
                }
            }
            i += 1;
        });
        res?;
        Ok((fw, step))
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub density: VarId,
    /// Parameter leaves in the same order as `for_each_param`.
    pub param_ids: Vec<VarId>,
    pub input_ids: Vec<VarId>,
}

#[derive(Clone, Copy, Debug)]
enum BoundLayer {
    Conv(BoundConv),
    Pool(usize),
}

impl BoundLayer {
    fn apply(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        match self {
            BoundLayer::Conv(c) => {
                let y = c.apply(g, x)?;
                Ok(g.relu(y))
            }
            BoundLayer::Pool(window) => g.maxpool2d(x, *window),
        }
    }
}

enum BoundBlock {
    Iadm(BoundIadm),
    Cross(BoundCross),
}

struct Binder<'a, 'g> {
    g: &'g mut Graph,
    ids: &'a mut Vec<VarId>,
}

impl Binder<'_, '_> {
    fn conv(&mut self, p: &ConvParams) -> BoundConv {
        let bound = iadm::bind_conv(self.g, p);
        self.ids.push(bound.w);
        if let Some(b) = bound.b {
            self.ids.push(b);
        }
        bound
    }

    fn branch(&mut self, br: &Branch) -> Vec<BoundLayer> {
        br.layers
            .iter()
            .map(|l| match &l.op {
                LayerOp::Conv(p) => BoundLayer::Conv(self.conv(p)),
                LayerOp::Pool(w) => BoundLayer::Pool(*w),
            })
            .collect()
    }
}

fn bind_extractor_tracked(g: &mut Graph, ids: &mut Vec<VarId>, e: &crate::iadm::ContextExtractor) -> crate::iadm::BoundExtractor {
    let mut binder = Binder { g, ids };
    let fuse = binder.conv(&e.fuse);
    crate::iadm::BoundExtractor {
        levels: e.levels,
        fuse,
    }
}

fn iadm_bind(g: &mut Graph, ids: &mut Vec<VarId>, b: &IadmBlock) -> BoundIadm {
    let extractors_specific = b
        .extractors_specific
        .iter()
        .map(|e| bind_extractor_tracked(g, ids, e))
        .collect();
    let extractor_shared = bind_extractor_tracked(g, ids, &b.extractor_shared);
    let extractor_shared_hat = b
        .extractor_shared_hat
        .as_ref()
        .map(|e| bind_extractor_tracked(g, ids, e));
    let gates_in = b.gates_in.as_ref().map(|gs| {
        gs.iter()
            .map(|p| Binder { g, ids }.conv(p))
            .collect()
    });
    let gates_out = b.gates_out.as_ref().map(|gs| {
        gs.iter()
            .map(|p| Binder { g, ids }.conv(p))
            .collect()
    });
    BoundIadm {
        extractors_specific,
        extractor_shared,
        extractor_shared_hat,
        gates_in,
        gates_out,
        gating_mode: b.gating_mode,
    }
}

fn cross_bind(g: &mut Graph, ids: &mut Vec<VarId>, b: &CrossBlock) -> BoundCross {
    let extractors = b
        .extractors
        .iter()
        .map(|e| bind_extractor_tracked(g, ids, e))
        .collect();
    let gates = b.gates.as_ref().map(|gs| {
        gs.iter()
            .map(|p| Binder { g, ids }.conv(p))
            .collect()
    });
    BoundCross {
        extractors,
        gates,
        gating_mode: b.gating_mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    fn small_cfg(variant: Variant) -> NetworkConfig {
        let mut cfg = NetworkConfig::rgbt(Backbone::TinyCsrnet);
        cfg.channel_scale = 0.25;
        cfg.variant = variant;
        cfg.seed = 11;
        cfg
    }

    fn rand_inputs(cfg: &NetworkConfig, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.modalities
            .iter()
            .map(|m| Tensor::gaussian(Shape::new(1, m.channels, h, w), 1.0, &mut rng))
            .collect()
    }

    #[test]
    fn unimodal_has_one_branch_and_no_blocks() {
        let fw = Framework::build(&small_cfg(Variant::Unimodal("rgb".into()))).unwrap();
        assert_eq!(fw.num_branches(), 1);
        assert_eq!(fw.num_fusion_blocks(), 0);
        assert!(!fw.has_shared_branch());
    }

    #[test]
    fn iadm_builds_one_block_per_injection_point() {
        let fw = Framework::build(&small_cfg(Variant::Iadm)).unwrap();
        assert_eq!(fw.num_fusion_blocks(), 4);
        assert_eq!(fw.num_branches(), 3);
        // Block channel counts match the named layers at scale 0.25.
        let expected = [4usize, 8, 12, 16];
        for ((_, blk), want) in fw.blocks.iter().zip(expected) {
            let FusionBlock::Iadm(b) = blk else { panic!() };
            assert_eq!(b.channels(), want);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small_cfg(Variant::Iadm);
        let a = Framework::build(&cfg).unwrap();
        let b = Framework::build(&cfg).unwrap();
        let mut va = Vec::new();
        a.for_each_param(&mut |_, t| va.extend_from_slice(t.data()));
        let mut vb = Vec::new();
        b.for_each_param(&mut |_, t| vb.extend_from_slice(t.data()));
        assert_eq!(va, vb);
    }

    #[test]
    fn bind_order_matches_param_order() {
        for variant in [
            Variant::Iadm,
            Variant::EarlyFusion,
            Variant::LateFusion,
            Variant::NoGating,
            Variant::NoShared,
            Variant::NoDistribution,
            Variant::Unimodal("thermal".into()),
        ] {
            let cfg = small_cfg(variant);
            let fw = Framework::build(&cfg).unwrap();
            let inputs = rand_inputs(&cfg, 16, 16, 5);
            let fp = fw.run(&inputs).unwrap();
            let mut tensors = Vec::new();
            fw.for_each_param(&mut |name, t| tensors.push((name.to_string(), t.clone())));
            assert_eq!(fp.param_ids.len(), tensors.len());
            for (id, (name, t)) in fp.param_ids.iter().zip(&tensors) {
                assert_eq!(
                    fp.graph.value(*id).data(),
                    t.data(),
                    "bound leaf does not match parameter `{name}`"
                );
            }
        }
    }

    #[test]
    fn stride_contract_holds() {
        let cfg = small_cfg(Variant::Iadm);
        let fw = Framework::build(&cfg).unwrap();
        assert_eq!(fw.stride(), 8);
        let inputs = rand_inputs(&cfg, 36, 20, 6);
        let out = fw.forward(&inputs).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 36usize.div_ceil(8), 20usize.div_ceil(8)));

        let mut mcfg = NetworkConfig::rgbt(Backbone::TinyMcnn);
        mcfg.channel_scale = 0.5;
        let mfw = Framework::build(&mcfg).unwrap();
        assert_eq!(mfw.stride(), 4);
        let inputs = rand_inputs(&mcfg, 18, 10, 7);
        let out = mfw.forward(&inputs).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 18usize.div_ceil(4), 10usize.div_ceil(4)));
    }

    #[test]
    fn density_maps_are_nonnegative() {
        for variant in [Variant::Iadm, Variant::LateFusion, Variant::NoShared] {
            let cfg = small_cfg(variant);
            let fw = Framework::build(&cfg).unwrap();
            let inputs = rand_inputs(&cfg, 16, 24, 8);
            let out = fw.forward(&inputs).unwrap();
            assert!(out.all_finite());
            assert!(out.min() >= 0.0);
        }
    }

    #[test]
    fn early_fusion_equals_single_branch_on_concatenated_input() {
        let mut early = small_cfg(Variant::EarlyFusion);
        early.seed = 99;
        let mut single = early.clone();
        single.modalities = vec![Modality::new("stacked", 4)];
        single.variant = Variant::Unimodal("stacked".into());

        let fw_early = Framework::build(&early).unwrap();
        let fw_single = Framework::build(&single).unwrap();
        assert_eq!(fw_early.param_count(), fw_single.param_count());

        let inputs = rand_inputs(&early, 16, 16, 9);
        let stacked = crate::tensor::ops::concat_channels(&[&inputs[0], &inputs[1]]).unwrap();
        let a = fw_early.forward(&inputs).unwrap();
        let b = fw_single.forward(&[stacked]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_image_gives_zero_density_at_init() {
        let cfg = small_cfg(Variant::Unimodal("rgb".into()));
        let fw = Framework::build(&cfg).unwrap();
        let inputs = vec![
            Tensor::zeros(Shape::new(1, 3, 16, 16)),
            Tensor::zeros(Shape::new(1, 1, 16, 16)),
        ];
        let out = fw.forward(&inputs).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_injection_point_lists_valid_names() {
        let mut cfg = small_cfg(Variant::Iadm);
        cfg.injection_points = vec!["conv9_9".into()];
        let err = Framework::build(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv9_9") && msg.contains("conv1_1"), "{msg}");
    }

    #[test]
    fn unimodal_rejects_unknown_modality() {
        let cfg = small_cfg(Variant::Unimodal("lidar".into()));
        let err = Framework::build(&cfg).unwrap_err();
        assert!(err.to_string().contains("lidar"));
    }

    #[test]
    fn forward_rejects_wrong_input_count() {
        let cfg = small_cfg(Variant::Iadm);
        let fw = Framework::build(&cfg).unwrap();
        let inputs = rand_inputs(&cfg, 16, 16, 10);
        let err = fw.forward(&inputs[..1]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn variant_structure_is_structural() {
        let iadm = Framework::build(&small_cfg(Variant::Iadm)).unwrap();
        let no_shared = Framework::build(&small_cfg(Variant::NoShared)).unwrap();
        let late = Framework::build(&small_cfg(Variant::LateFusion)).unwrap();
        assert!(!no_shared.has_shared_branch());
        assert!(no_shared.param_names().iter().all(|n| !n.starts_with("shared/")));
        assert!(iadm.param_names().iter().any(|n| n.starts_with("shared/")));
        assert_eq!(late.num_branches(), 2);
        assert!(late.param_names().iter().any(|n| n.starts_with("trunk/fuse_1")));
        // Gating ablation keeps the iadm layout minus the gates.
        let no_gating = Framework::build(&small_cfg(Variant::NoGating)).unwrap();
        let gate_names: Vec<String> = iadm
            .param_names()
            .into_iter()
            .filter(|n| !n.contains("/gate_"))
            .collect();
        assert_eq!(no_gating.param_names(), gate_names);
    }

    #[test]
    fn modality_count_is_generic() {
        for count in 1..=3usize {
            let mut cfg = small_cfg(Variant::Iadm);
            cfg.modalities = (0..count)
                .map(|i| Modality::new(format!("m{i}"), i + 1))
                .collect();
            let fw = Framework::build(&cfg).unwrap();
            let inputs = rand_inputs(&cfg, 16, 16, 11);
            let out = fw.forward(&inputs).unwrap();
            assert!(out.all_finite());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_cfg(Variant::Iadm);
        let fw = Framework::build(&cfg).unwrap();
        fw.save_checkpoint(&path, 42).unwrap();
        let (loaded, step) = Framework::load_checkpoint(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded.config(), fw.config());
        let inputs = rand_inputs(&cfg, 16, 16, 12);
        let a = fw.forward(&inputs).unwrap();
        let b = loaded.forward(&inputs).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = small_cfg(Variant::Unimodal("thermal".into()));
        cfg.gating_mode = GatingMode::Sigmoid;
        cfg.pyramid_levels = 2;
        let text = cfg.to_kv();
        let parsed = NetworkConfig::from_kv(&parse_kv(&text).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn channel_scale_validation() {
        let mut cfg = small_cfg(Variant::Iadm);
        cfg.channel_scale = 0.0;
        assert!(Framework::build(&cfg).is_err());
        cfg.channel_scale = 1.5;
        assert!(Framework::build(&cfg).is_err());
        cfg.channel_scale = 0.01; // rounds the narrowest layer to zero
        assert!(Framework::build(&cfg).is_err());
    }
}
