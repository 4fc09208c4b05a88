use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::assignment::{correlation, extract_matches, log_sinkhorn, Assignment, MatchSet};
use crate::attention::{attend_over, AttentionParams};
use crate::autodiff::{Backend, Eager};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::featio::{normalize_positions, FeatureSet};
use crate::nn::{Linear, Mlp, ParamId, ParamStore};
use crate::residual::{modulate_heads, BypassParams, BypassShape, BypassState, ScoreKind};
use crate::sparse::{knn_mine, MiningStage, NeighborIndex, ScoreSource};
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
}

/// Every learnable tensor of the network, held in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub bypass: BypassParams,
    pub blocks: Vec<BlockParams>,
    /// `W_L`, applied to the final features before correlation.
    pub final_proj: Linear,
    pub dustbin: ParamId,
}

fn set_slope(m: &mut Mlp, slope: f64) {
    m.slope = slope;
}

impl ModelParams {
    /// Builds a freshly initialized model; the layout and values depend only
    /// on `config`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut encoder = EncoderParams::new(&mut store, "encoder", c, &mut rng);
        let mut bypass = BypassParams::new(
            &mut store,
            "bypass",
            BypassShape {
                channels: c,
                embed: config.bypass_dim,
                layers: config.layers,
                heads: config.heads,
                lambda_init: config.lambda_init,
                beta_init: config.beta_init,
            },
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(BlockParams {
                self_attn: AttentionParams::new(&mut store, &format!("block{l}.self"), c, config.heads, &mut rng)?,
                cross_attn: AttentionParams::new(&mut store, &format!("block{l}.cross"), c, config.heads, &mut rng)?,
            });
        }
        let final_proj = Linear::new(&mut store, "final", c, c, &mut rng);
        let dustbin = store.add("dustbin", Tensor2::scalar(config.dustbin_init));

        let slope = config.lrelu_slope;
        for m in [&mut encoder.f1, &mut encoder.f2, &mut bypass.f4, &mut bypass.f5, &mut bypass.f6, &mut bypass.f7] {
            set_slope(m, slope);
        }
        for blk in &mut blocks {
            set_slope(&mut blk.self_attn.f3, slope);
            set_slope(&mut blk.cross_attn.f3, slope);
        }
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            bypass,
            blocks,
            final_proj,
            dustbin,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Network inputs of one image pair: raw descriptors and normalized
/// positions.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub desc_a: Tensor2,
    pub desc_b: Tensor2,
    pub pos_a: Tensor2,
    pub pos_b: Tensor2,
}

impl PairFeatures {
    pub fn new(a: &FeatureSet, b: &FeatureSet) -> Result<Self> {
        if a.channels() != b.channels() {
            return Err(Error::shape(
                "feature pair",
                a.descriptors().shape(),
                b.descriptors().shape(),
            ));
        }
        Ok(Self {
            desc_a: a.descriptors().clone(),
            desc_b: b.descriptors().clone(),
            pos_a: normalize_positions(a),
            pos_b: normalize_positions(b),
        })
    }
}

/// Raw bypass score of one attention direction, plus its neighbor table
/// and gathered scores on the sparse path.
#[derive(Clone)]
pub struct Stream<V> {
    pub full: V,
    pub restricted: Option<(V, NeighborIndex)>,
}

/// The four attention directions of a block.
#[derive(Clone)]
pub struct Streams<V> {
    pub self_a: Stream<V>,
    pub self_b: Stream<V>,
    pub cross_ab: Stream<V>,
    pub cross_ba: Stream<V>,
}

impl<V: Clone> Streams<V> {
    /// Dense streams, or on the sparse path neighbor tables mined from the
    /// current scores with this stage's budgets (clamped to the set sizes).
    pub fn build<B: Backend<Var = V>>(
        b: &mut B,
        state: &BypassState<V>,
        cfg: &ModelConfig,
        stage: MiningStage,
    ) -> Result<Self> {
        let s_d_t = b.transpose(&state.s_d);
        let budgets = if cfg.sparse { Some(cfg.stage_budgets(stage)?) } else { None };
        let mut stream = |full: V, k: Option<usize>, source: ScoreSource| -> Result<Stream<V>> {
            let restricted = match k {
                None => None,
                Some(k) => {
                    let scores = b.value(&full);
                    let idx = knn_mine(scores, k.min(scores.cols()), source)?;
                    Some((b.gather_cols(&full, &idx)?, idx))
                }
            };
            Ok(Stream { full, restricted })
        };
        Ok(Self {
            self_a: stream(state.s_p_a.clone(), budgets.map(|b| b.0), ScoreSource::Position)?,
            self_b: stream(state.s_p_b.clone(), budgets.map(|b| b.0), ScoreSource::Position)?,
            cross_ab: stream(state.s_d.clone(), budgets.map(|b| b.1), ScoreSource::Descriptor)?,
            cross_ba: stream(s_d_t, budgets.map(|b| b.1), ScoreSource::Descriptor)?,
        })
    }
}

/// Attention maps of one direction in one block.
#[derive(Clone, Debug)]
pub struct StreamCapture {
    pub name: &'static str,
    /// Post-softmax weights per head; on the sparse path column `t` of row
    /// `i` refers to key `neighbors.row(i)[t]`.
    pub weights: Vec<Tensor2>,
    pub neighbors: Option<NeighborIndex>,
    /// Unmodulated bypass score over all keys.
    pub raw_bypass: Tensor2,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    /// Whether the modulated score was added in this direction.
    pub bypass_active: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub layer: usize,
    pub streams: Vec<StreamCapture>,
}

#[derive(Clone, Debug)]
pub struct ActivationNorm {
    pub stage: String,
    pub norm_a: f64,
    pub norm_b: f64,
}

/// Wall-clock seconds spent in each part of a forward pass. `bypass` covers
/// the score matrices, their refresh and neighbor mining.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct PhaseTimes {
    pub encode: f64,
    pub bypass: f64,
    pub attention: f64,
    pub head: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.encode + self.bypass + self.attention + self.head
    }
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub activation_norms: Vec<ActivationNorm>,
    pub capture: Option<AttentionCapture>,
    pub phases: PhaseTimes,
}

impl Diagnostics {
    fn record(&mut self, stage: impl Into<String>, a: &Tensor2, b: &Tensor2) {
        self.activation_norms.push(ActivationNorm {
            stage: stage.into(),
            norm_a: a.norm(),
            norm_b: b.norm(),
        });
    }

    pub fn describe_norms(&self) -> String {
        self.activation_norms
            .iter()
            .map(|n| format!("{}: |A|={:.4e} |B|={:.4e}", n.stage, n.norm_a, n.norm_b))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[allow(clippy::too_many_arguments)]
fn run_stream<B: Backend>(
    b: &mut B,
    params: &ModelParams,
    attn: &AttentionParams,
    layer: usize,
    kind: ScoreKind,
    active: bool,
    x: &B::Var,
    y: &B::Var,
    stream: &Stream<B::Var>,
    capture: Option<(&'static str, &mut Vec<StreamCapture>)>,
) -> Result<B::Var> {
    let store = &params.store;
    let (lambdas, betas) = params.bypass.layers[layer].scalars(kind);
    let (score, neighbors) = match &stream.restricted {
        Some((g, idx)) => (g, Some(idx)),
        None => (&stream.full, None),
    };
    let bypass = if active {
        Some(modulate_heads(b, store, score, lambdas, betas, params.config.lrelu_slope)?)
    } else {
        None
    };
    let att = attend_over(b, store, attn, x, y, bypass.as_deref(), neighbors, capture.is_some())?;
    if let Some((name, sink)) = capture {
        sink.push(StreamCapture {
            name,
            weights: att.weights.iter().map(|w| b.value(w).clone()).collect(),
            neighbors: neighbors.cloned(),
            raw_bypass: b.value(&stream.full).clone(),
            lambda: lambdas.iter().map(|&id| store.value(id).get(0, 0)).collect(),
            beta: betas.iter().map(|&id| store.value(id).get(0, 0)).collect(),
            bypass_active: active,
        });
    }
    Ok(att.out)
}

/// One block: self-attention on A and on B, then both cross directions
/// computed from the post-self features of both images.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_block<B: Backend>(
    b: &mut B,
    params: &ModelParams,
    layer: usize,
    xa: &B::Var,
    xb: &B::Var,
    streams: &Streams<B::Var>,
    capture: Option<&mut AttentionCapture>,
) -> Result<(B::Var, B::Var)> {
    let cfg = &params.config;
    let blk = params
        .blocks
        .get(layer)
        .ok_or_else(|| Error::config(format!("layer {layer} outside 0..{}", cfg.layers)))?;
    let mut sink = capture.map(|c| &mut c.streams);
    let (sa, ca) = (&blk.self_attn, &blk.cross_attn);
    let pos = ScoreKind::Position;
    let desc = ScoreKind::Descriptor;
    let xa1 = run_stream(b, params, sa, layer, pos, cfg.res_self, xa, xa, &streams.self_a, sink.as_deref_mut().map(|s| ("self_a", s)))?;
    let xb1 = run_stream(b, params, sa, layer, pos, cfg.res_self, xb, xb, &streams.self_b, sink.as_deref_mut().map(|s| ("self_b", s)))?;
    let xa2 = run_stream(b, params, ca, layer, desc, cfg.res_cross, &xa1, &xb1, &streams.cross_ab, sink.as_deref_mut().map(|s| ("cross_ab", s)))?;
    let xb2 = run_stream(b, params, ca, layer, desc, cfg.res_cross, &xb1, &xa1, &streams.cross_ba, sink.as_deref_mut().map(|s| ("cross_ba", s)))?;
    Ok((xa2, xb2))
}

/// Runs the whole network and returns the log assignment matrix. Norms of
/// the intermediate features are written to `diag` as they are produced, so
/// they survive a failure further down.
pub fn forward_graph<B: Backend>(
    b: &mut B,
    params: &ModelParams,
    pair: &PairFeatures,
    capture_layer: Option<usize>,
    diag: &mut Diagnostics,
) -> Result<B::Var> {
    let cfg = &params.config;
    let store = &params.store;
    if let Some(l) = capture_layer {
        if l >= cfg.layers {
            return Err(Error::config(format!("layer {l} outside 0..{}", cfg.layers)));
        }
    }
    let c = cfg.channels;
    for d in [&pair.desc_a, &pair.desc_b] {
        if d.cols() != c {
            return Err(Error::shape("forward", d.shape(), (d.rows(), c)));
        }
    }
    let da = b.constant(pair.desc_a.clone());
    let db = b.constant(pair.desc_b.clone());
    let pa = b.constant(pair.pos_a.clone());
    let pb = b.constant(pair.pos_b.clone());

    let mut clock = Instant::now();
    let mut lap = |slot: &mut f64| {
        let now = Instant::now();
        *slot += (now - clock).as_secs_f64();
        clock = now;
    };
    let mut xa = encode(b, store, &params.encoder, &da, &pa)?;
    let mut xb = encode(b, store, &params.encoder, &db, &pb)?;
    diag.record("encoder", b.value(&xa), b.value(&xb));
    lap(&mut diag.phases.encode);

    let mut state = BypassState::compute(b, store, &params.bypass, &da, &db, &pa, &pb)?;
    let mut streams = Streams::build(b, &state, cfg, MiningStage::PreAdjust)?;
    lap(&mut diag.phases.bypass);
    for layer in 0..cfg.layers {
        let mut cap = (capture_layer == Some(layer)).then(|| AttentionCapture {
            layer,
            streams: Vec::new(),
        });
        let (na, nb) = hybrid_block(b, params, layer, &xa, &xb, &streams, cap.as_mut())?;
        xa = na;
        xb = nb;
        diag.record(format!("block{layer}"), b.value(&xa), b.value(&xb));
        if cap.is_some() {
            diag.capture = cap;
        }
        lap(&mut diag.phases.attention);
        if layer + 1 == cfg.adjust_layer {
            if cfg.adjust {
                state = state.adjust(b, store, &params.bypass, &xa, &xb)?;
            }
            if cfg.adjust || cfg.sparse {
                streams = Streams::build(b, &state, cfg, MiningStage::PostAdjust)?;
            }
            lap(&mut diag.phases.bypass);
        }
    }
    let scores = correlation(b, store, &params.final_proj, &xa, &xb)?;
    let sv = b.value(&scores);
    diag.activation_norms.push(ActivationNorm {
        stage: "scores".into(),
        norm_a: sv.norm(),
        norm_b: sv.norm(),
    });
    let dustbin = b.param(store, params.dustbin);
    let out = log_sinkhorn(b, &scores, &dustbin, cfg.sinkhorn_iters);
    lap(&mut diag.phases.head);
    out
}

/// Inference on plain tensors.
pub fn forward(params: &ModelParams, a: &FeatureSet, b: &FeatureSet) -> Result<(Assignment, Diagnostics)> {
    forward_capture(params, a, b, None)
}

pub fn forward_capture(
    params: &ModelParams,
    a: &FeatureSet,
    b: &FeatureSet,
    capture_layer: Option<usize>,
) -> Result<(Assignment, Diagnostics)> {
    let pair = PairFeatures::new(a, b)?;
    let mut e = Eager::new();
    let mut diag = Diagnostics::default();
    let lp = forward_graph(&mut e, params, &pair, capture_layer, &mut diag)?;
    let assignment = Assignment::from_log_probs(e.value(&lp).clone(), params.config.sinkhorn_iters);
    Ok((assignment, diag))
}

/// Forward pass followed by match extraction with the configured threshold.
pub fn match_pair(params: &ModelParams, a: &FeatureSet, b: &FeatureSet) -> Result<(Assignment, MatchSet)> {
    let (assignment, _) = forward(params, a, b)?;
    let cfg = &params.config;
    let matches = extract_matches(&assignment, cfg.match_threshold, cfg.mutual_check);
    Ok((assignment, matches))
}
