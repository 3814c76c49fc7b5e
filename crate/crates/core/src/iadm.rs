//! Information aggregation-distribution between modality branches.
//!
//! Each feature map is first summarised into *contextual information* by an
//! L-level pyramid: level `l` max-pools with window `2^(l-1)`, upsamples back
//! to the input size with nearest-neighbour interpolation, the levels are
//! concatenated along channels and fused by a 1x1 convolution. The
//! aggregation transfer adds gated context residuals from every
//! modality-specific feature onto the shared feature; the distribution
//! transfer then pushes gated residuals of the enhanced shared context back
//! onto each specific feature.
//!
//! All operations exist in two forms: recorded on a [`Graph`] (used inside
//! networks, differentiable) and as plain tensor functions which run a
//! scratch graph internally, so both forms share one implementation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Graph, Tensor, VarId};

/// How gating weights are applied to a context residual.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum GatingMode {
    /// The 1x1 gate convolution output multiplies the residual as-is.
    #[default]
    Literal,
    /// The gate output is squashed through a sigmoid first.
    Sigmoid,
}

impl GatingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::Literal => "literal",
            GatingMode::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GatingMode::Literal),
            "sigmoid" => Ok(GatingMode::Sigmoid),
            other => Err(Error::config(format!(
                "unknown gating mode `{other}` (expected literal or sigmoid)"
            ))),
        }
    }
}

/// Pyramid context extractor: L pooling levels fused by a 1x1 convolution
/// mapping `L*c -> c` channels.
#[derive(Clone, Debug)]
pub struct ContextExtractor {
    pub levels: usize,
    pub fuse: ConvParams,
}

impl ContextExtractor {
    pub fn new(levels: usize, fuse: ConvParams) -> Result<Self> {
        let e = ContextExtractor { levels, fuse };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("pyramid level count must be at least 1"));
        }
        self.fuse.validate()?;
        if self.fuse.kernel_h() != 1 || self.fuse.kernel_w() != 1 {
            return Err(Error::config(format!(
                "context fuse convolution must be 1x1, found {}x{}",
                self.fuse.kernel_h(),
                self.fuse.kernel_w()
            )));
        }
        if self.fuse.in_channels() != self.levels * self.fuse.out_channels() {
            return Err(Error::config(format!(
                "context fuse convolution maps {} -> {} channels; expected {} -> {} for {} levels",
                self.fuse.in_channels(),
                self.fuse.out_channels(),
                self.levels * self.fuse.out_channels(),
                self.fuse.out_channels(),
                self.levels
            )));
        }
        Ok(())
    }

    /// Channel count the extractor operates on.
    pub fn channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.fuse.param_count()
    }

    /// Gaussian-initialised extractor for `channels`-wide features.
    pub fn gaussian(levels: usize, channels: usize, std: f64, rng: &mut impl Rng) -> Self {
        let fuse = ConvParams::gaussian(channels, levels * channels, 1, 1, 1, 0, 1, std, true, rng);
        ContextExtractor { levels, fuse }
    }
}

/// One aggregation-distribution block, owned by a single injection point.
///
/// Ablations are structural: a block built without gating owns no gate
/// convolutions at all, and a block built without distribution owns neither
/// the enhanced-shared extractor nor the outgoing gates.
#[derive(Clone, Debug)]
pub struct IadmBlock {
    /// One context extractor per modality-specific feature.
    pub extractors_specific: Vec<ContextExtractor>,
    pub extractor_shared: ContextExtractor,
    /// Extractor for the enhanced shared feature; present iff distribution
    /// is enabled.
    pub extractor_shared_hat: Option<ContextExtractor>,
    /// Gates on specific-to-shared residuals; present iff gating is enabled.
    pub gates_in: Option<Vec<ConvParams>>,
    /// Gates on shared-to-specific residuals; present iff both distribution
    /// and gating are enabled.
    pub gates_out: Option<Vec<ConvParams>>,
    pub gating_mode: GatingMode,
}

impl IadmBlock {
    /// Gaussian-initialised block for `modalities` specific branches of
    /// `channels`-wide features.
    #[allow(clippy::too_many_arguments)]
    pub fn gaussian(
        modalities: usize,
        channels: usize,
        levels: usize,
        gating_mode: GatingMode,
        gating: bool,
        distribution: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let gate = |rng: &mut _| ConvParams::gaussian(channels, channels, 1, 1, 1, 0, 1, std, true, rng);
        let extractors_specific = (0..modalities)
            .map(|_| ContextExtractor::gaussian(levels, channels, std, rng))
            .collect();
        let extractor_shared = ContextExtractor::gaussian(levels, channels, std, rng);
        let extractor_shared_hat =
            distribution.then(|| ContextExtractor::gaussian(levels, channels, std, rng));
        let gates_in = gating.then(|| (0..modalities).map(|_| gate(rng)).collect());
        let gates_out =
            (gating && distribution).then(|| (0..modalities).map(|_| gate(rng)).collect());
        IadmBlock {
            extractors_specific,
            extractor_shared,
            extractor_shared_hat,
            gates_in,
            gates_out,
            gating_mode,
        }
    }

    pub fn gating_enabled(&self) -> bool {
        self.gates_in.is_some()
    }

    pub fn distribution_enabled(&self) -> bool {
        self.extractor_shared_hat.is_some()
    }

    pub fn modalities(&self) -> usize {
        self.extractors_specific.len()
    }

    pub fn channels(&self) -> usize {
        self.extractor_shared.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for e in self
            .extractors_specific
            .iter()
            .chain(Some(&self.extractor_shared))
            .chain(self.extractor_shared_hat.as_ref())
        {
            e.validate()?;
            if e.channels() != c {
                return Err(Error::config(format!(
                    "extractor channel count {} disagrees with block channel count {c}",
                    e.channels()
                )));
            }
        }
        for g in self
            .gates_in
            .iter()
            .chain(self.gates_out.iter())
            .flatten()
        {
            g.validate()?;
            if g.in_channels() != c || g.out_channels() != c || g.kernel_h() != 1 || g.kernel_w() != 1 {
                return Err(Error::config(format!(
                    "gate convolution must be 1x1 {c} -> {c} channels, found {}x{} {} -> {}",
                    g.kernel_h(),
                    g.kernel_w(),
                    g.in_channels(),
                    g.out_channels()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.extractors_specific
            .iter()
            .chain(Some(&self.extractor_shared))
            .chain(self.extractor_shared_hat.as_ref())
            .map(ContextExtractor::param_count)
            .sum::<usize>()
            + self
                .gates_in
                .iter()
                .chain(self.gates_out.iter())
                .flatten()
                .map(ConvParams::param_count)
                .sum::<usize>()
    }
}

/// Direct mutual refinement between modality-specific features, used when
/// no shared branch exists: each feature receives the gated context
/// residuals of every other modality.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub extractors: Vec<ContextExtractor>,
    /// Gates ordered by (target, source) pairs with source != target;
    /// present iff gating is enabled.
    pub gates: Option<Vec<ConvParams>>,
    pub gating_mode: GatingMode,
}

impl CrossBlock {
    pub fn gaussian(
        modalities: usize,
        channels: usize,
        levels: usize,
        gating_mode: GatingMode,
        gating: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let extractors = (0..modalities)
            .map(|_| ContextExtractor::gaussian(levels, channels, std, rng))
            .collect();
        let gates = gating.then(|| {
            (0..modalities * modalities.saturating_sub(1))
                .map(|_| ConvParams::gaussian(channels, channels, 1, 1, 1, 0, 1, std, true, rng))
                .collect()
        });
        CrossBlock {
            extractors,
            gates,
            gating_mode,
        }
    }

    pub fn modalities(&self) -> usize {
        self.extractors.len()
    }

    pub fn param_count(&self) -> usize {
        self.extractors
            .iter()
            .map(ContextExtractor::param_count)
            .sum::<usize>()
            + self
                .gates
                .iter()
                .flatten()
                .map(ConvParams::param_count)
                .sum::<usize>()
    }
}

/// Context tensors cached by [`aggregate`] for reuse in [`distribute`].
#[derive(Clone, Debug)]
pub struct ContextBundle {
    /// Contextual information of each modality-specific feature.
    pub specific: Vec<Tensor>,
    /// Contextual information of the (pre-enhancement) shared feature.
    pub shared: Tensor,
}

// Graph-recorded forms. The model builder binds parameter tensors to graph
// leaves once per forward pass and then calls these.

/// Graph-bound 1x1/convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub w: VarId,
    pub b: Option<VarId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        g.conv2d(x, self.w, self.b, self.stride, self.padding, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct BoundExtractor {
    pub levels: usize,
    pub fuse: BoundConv,
}

#[derive(Clone, Debug)]
pub struct BoundIadm {
    pub extractors_specific: Vec<BoundExtractor>,
    pub extractor_shared: BoundExtractor,
    pub extractor_shared_hat: Option<BoundExtractor>,
    pub gates_in: Option<Vec<BoundConv>>,
    pub gates_out: Option<Vec<BoundConv>>,
    pub gating_mode: GatingMode,
}

/// Cached context node handles within one recorded forward pass.
pub struct BoundContext {
    pub specific: Vec<VarId>,
    pub shared: VarId,
}

/// Pyramid context extraction recorded on a graph.
pub fn extract_context_on(g: &mut Graph, f: VarId, e: &BoundExtractor) -> Result<VarId> {
    let shape = g.shape(f);
    let mut levels = Vec::with_capacity(e.levels);
    for l in 1..=e.levels {
        let window = 1usize << (l - 1);
        if window == 1 {
            levels.push(f);
        } else {
            let pooled = g.maxpool2d(f, window)?;
            levels.push(g.upsample_to(pooled, shape.h, shape.w)?);
        }
    }
    let stacked = if levels.len() == 1 {
        levels[0]
    } else {
        g.concat_channels(&levels)?
    };
    e.fuse.apply(g, stacked)
}

fn gate_residual_on(
    g: &mut Graph,
    residual: VarId,
    gate: Option<&BoundConv>,
    mode: GatingMode,
) -> Result<VarId> {
    match gate {
        None => Ok(residual),
        Some(conv) => {
            let mut w = conv.apply(g, residual)?;
            if mode == GatingMode::Sigmoid {
                w = g.sigmoid(w);
            }
            g.mul(residual, w)
        }
    }
}

/// Aggregation transfer recorded on a graph: returns the enhanced shared
/// feature plus the context bundle for later distribution.
pub fn aggregate_on(
    g: &mut Graph,
    specific: &[VarId],
    shared: VarId,
    blk: &BoundIadm,
) -> Result<(VarId, BoundContext)> {
    if specific.len() != blk.extractors_specific.len() {
        return Err(Error::usage(format!(
            "aggregate: {} specific features for a block with {} modalities",
            specific.len(),
            blk.extractors_specific.len()
        )));
    }
    let shared_shape = g.shape(shared);
    for &f in specific {
        if g.shape(f) != shared_shape {
            return Err(Error::config(format!(
                "aggregate: feature shape {} does not match shared shape {}",
                g.shape(f),
                shared_shape
            )));
        }
    }
    let ctx_specific: Vec<VarId> = specific
        .iter()
        .zip(&blk.extractors_specific)
        .map(|(&f, e)| extract_context_on(g, f, e))
        .collect::<Result<_>>()?;
    let ctx_shared = extract_context_on(g, shared, &blk.extractor_shared)?;
    let mut enhanced = shared;
    for (m, &ctx_m) in ctx_specific.iter().enumerate() {
        let residual = g.sub(ctx_m, ctx_shared)?;
        let gate = blk.gates_in.as_ref().map(|gs| &gs[m]);
        let term = gate_residual_on(g, residual, gate, blk.gating_mode)?;
        enhanced = g.add(enhanced, term)?;
    }
    Ok((
        enhanced,
        BoundContext {
            specific: ctx_specific,
            shared: ctx_shared,
        },
    ))
}

/// Distribution transfer recorded on a graph: refines each specific feature
/// with the gated residual of the enhanced shared context. The specific
/// contexts are reused from `ctx`, not re-extracted.
pub fn distribute_on(
    g: &mut Graph,
    specific: &[VarId],
    shared_enhanced: VarId,
    ctx: &BoundContext,
    blk: &BoundIadm,
) -> Result<Vec<VarId>> {
    let hat = match &blk.extractor_shared_hat {
        None => return Ok(specific.to_vec()),
        Some(e) => e,
    };
    if specific.len() != ctx.specific.len() {
        return Err(Error::usage(format!(
            "distribute: {} specific features but the context bundle holds {}",
            specific.len(),
            ctx.specific.len()
        )));
    }
    let ctx_hat = extract_context_on(g, shared_enhanced, hat)?;
    let mut refined = Vec::with_capacity(specific.len());
    for (m, (&f, &ctx_m)) in specific.iter().zip(&ctx.specific).enumerate() {
        let residual = g.sub(ctx_hat, ctx_m)?;
        let gate = blk.gates_out.as_ref().map(|gs| &gs[m]);
        let term = gate_residual_on(g, residual, gate, blk.gating_mode)?;
        refined.push(g.add(f, term)?);
    }
    Ok(refined)
}

#[derive(Clone, Debug)]
pub struct BoundCross {
    pub extractors: Vec<BoundExtractor>,
    pub gates: Option<Vec<BoundConv>>,
    pub gating_mode: GatingMode,
}

pub fn bind_cross(g: &mut Graph, blk: &CrossBlock) -> BoundCross {
    BoundCross {
        extractors: blk.extractors.iter().map(|e| bind_extractor(g, e)).collect(),
        gates: blk
            .gates
            .as_ref()
            .map(|gs| gs.iter().map(|p| bind_conv(g, p)).collect()),
        gating_mode: blk.gating_mode,
    }
}

/// Mutual refinement recorded on a graph: every specific feature absorbs
/// the gated context residuals of the other modalities.
pub fn cross_refine_on(g: &mut Graph, specific: &[VarId], blk: &BoundCross) -> Result<Vec<VarId>> {
    if specific.len() != blk.extractors.len() {
        return Err(Error::usage(format!(
            "cross_refine: {} features for a block with {} modalities",
            specific.len(),
            blk.extractors.len()
        )));
    }
    let ctx: Vec<VarId> = specific
        .iter()
        .zip(&blk.extractors)
        .map(|(&f, e)| extract_context_on(g, f, e))
        .collect::<Result<_>>()?;
    let m = specific.len();
    let mut refined = Vec::with_capacity(m);
    let mut pair = 0;
    for target in 0..m {
        let mut acc = specific[target];
        for source in 0..m {
            if source == target {
                continue;
            }
            let residual = g.sub(ctx[source], ctx[target])?;
            let gate = blk.gates.as_ref().map(|gs| &gs[pair]);
            let term = gate_residual_on(g, residual, gate, blk.gating_mode)?;
            acc = g.add(acc, term)?;
            pair += 1;
        }
        refined.push(acc);
    }
    Ok(refined)
}

/// Full module pass recorded on a graph: aggregation then distribution.
/// Returns the enhanced shared feature followed by the refined specific
/// features, in modality order.
pub fn iadm_forward_on(
    g: &mut Graph,
    shared: VarId,
    specific: &[VarId],
    blk: &BoundIadm,
) -> Result<(VarId, Vec<VarId>)> {
    let (enhanced, ctx) = aggregate_on(g, specific, shared, blk)?;
    let refined = distribute_on(g, specific, enhanced, &ctx, blk)?;
    Ok((enhanced, refined))
}

// Plain-tensor forms, each running a scratch graph over the same code path.

pub fn bind_conv(g: &mut Graph, p: &ConvParams) -> BoundConv {
    BoundConv {
        w: g.leaf(p.weights.clone()),
        b: p.bias.as_ref().map(|b| g.leaf(b.clone())),
        stride: p.stride,
        padding: p.padding,
        dilation: p.dilation,
    }
}

pub fn bind_extractor(g: &mut Graph, e: &ContextExtractor) -> BoundExtractor {
    BoundExtractor {
        levels: e.levels,
        fuse: bind_conv(g, &e.fuse),
    }
}

pub fn bind_block(g: &mut Graph, blk: &IadmBlock) -> BoundIadm {
    BoundIadm {
        extractors_specific: blk
            .extractors_specific
            .iter()
            .map(|e| bind_extractor(g, e))
            .collect(),
        extractor_shared: bind_extractor(g, &blk.extractor_shared),
        extractor_shared_hat: blk.extractor_shared_hat.as_ref().map(|e| bind_extractor(g, e)),
        gates_in: blk
            .gates_in
            .as_ref()
            .map(|gs| gs.iter().map(|p| bind_conv(g, p)).collect()),
        gates_out: blk
            .gates_out
            .as_ref()
            .map(|gs| gs.iter().map(|p| bind_conv(g, p)).collect()),
        gating_mode: blk.gating_mode,
    }
}

/// Contextual information of a feature map.
pub fn extract_context(f: &Tensor, e: &ContextExtractor) -> Result<Tensor> {
    e.validate()?;
    if f.shape().c != e.channels() {
        return Err(Error::config(format!(
            "extract_context: feature has {} channels, extractor expects {}",
            f.shape().c,
            e.channels()
        )));
    }
    let mut g = Graph::new();
    let fid = g.leaf(f.clone());
    let bound = bind_extractor(&mut g, e);
    let out = extract_context_on(&mut g, fid, &bound)?;
    Ok(g.value(out).clone())
}

/// Aggregation transfer over plain tensors.
pub fn aggregate(
    specific: &[&Tensor],
    shared: &Tensor,
    blk: &IadmBlock,
) -> Result<(Tensor, ContextBundle)> {
    blk.validate()?;
    let mut g = Graph::new();
    let sids: Vec<VarId> = specific.iter().map(|t| g.leaf((*t).clone())).collect();
    let sh = g.leaf(shared.clone());
    let bound = bind_block(&mut g, blk);
    let (enhanced, ctx) = aggregate_on(&mut g, &sids, sh, &bound)?;
    Ok((
        g.value(enhanced).clone(),
        ContextBundle {
            specific: ctx.specific.iter().map(|&id| g.value(id).clone()).collect(),
            shared: g.value(ctx.shared).clone(),
        },
    ))
}

/// Distribution transfer over plain tensors.
pub fn distribute(
    specific: &[&Tensor],
    shared_enhanced: &Tensor,
    ctx: &ContextBundle,
    blk: &IadmBlock,
) -> Result<Vec<Tensor>> {
    blk.validate()?;
    if ctx.specific.len() != specific.len() {
        return Err(Error::usage(format!(
            "distribute: context bundle holds {} modalities, features supply {}",
            ctx.specific.len(),
            specific.len()
        )));
    }
    for (f, c) in specific.iter().zip(&ctx.specific) {
        if f.shape() != c.shape() {
            return Err(Error::usage(format!(
                "distribute: context shape {} does not match feature shape {}",
                c.shape(),
                f.shape()
            )));
        }
    }
    let mut g = Graph::new();
    let sids: Vec<VarId> = specific.iter().map(|t| g.leaf((*t).clone())).collect();
    let enh = g.leaf(shared_enhanced.clone());
    let ctx_ids = BoundContext {
        specific: ctx.specific.iter().map(|t| g.leaf(t.clone())).collect(),
        shared: g.leaf(ctx.shared.clone()),
    };
    let bound = bind_block(&mut g, blk);
    let refined = distribute_on(&mut g, &sids, enh, &ctx_ids, &bound)?;
    Ok(refined.into_iter().map(|id| g.value(id).clone()).collect())
}

/// Full module pass over plain tensors: `(shared, specific...) ->
/// (enhanced shared, refined specific...)`.
pub fn iadm_forward(
    shared: &Tensor,
    specific: &[&Tensor],
    blk: &IadmBlock,
) -> Result<(Tensor, Vec<Tensor>)> {
    blk.validate()?;
    let mut g = Graph::new();
    let sids: Vec<VarId> = specific.iter().map(|t| g.leaf((*t).clone())).collect();
    let sh = g.leaf(shared.clone());
    let bound = bind_block(&mut g, blk);
    let (enhanced, refined) = iadm_forward_on(&mut g, sh, &sids, &bound)?;
    Ok((
        g.value(enhanced).clone(),
        refined.into_iter().map(|id| g.value(id).clone()).collect(),
    ))
}
