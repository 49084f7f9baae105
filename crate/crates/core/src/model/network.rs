use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoding::positional_encoding;
use super::genome::{Genome, PhaseType};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormKind, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running batch-norm statistics.
pub const STATS_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    /// Running-statistics slot, for batch norm only.
    stats: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Ffn {
    hidden: Vec<Linear>,
    out: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: Attention,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Option<Linear>,
    input_norm: Norm,
    encoder: Vec<EncoderLayer>,
    decoders: Vec<Decoder>,
}

/// Running per-feature mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Transformer reconstruction model built from a genome.
#[derive(Debug, Clone)]
pub struct AnomalyModel {
    genome: Genome,
    m: usize,
    d: usize,
    seed: u64,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
    layout: Layout,
    pos: Tensor,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    /// Xavier-uniform weights, zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..=a)).collect();
        let w = self.push(format!("{name}.w"), Tensor::from_vec(fan_in, fan_out, data).expect("sized"));
        let b = self.push(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize, kind: NormKind) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(1, d));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(1, d));
        let stats = (kind == NormKind::Batch).then(|| {
            self.stats.push(RunningStats {
                mean: vec![0.0; d],
                var: vec![1.0; d],
            });
            self.stats.len() - 1
        });
        Norm { gamma, beta, stats }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize, layers: usize) -> Ffn {
        let hidden = (0..layers)
            .map(|i| self.linear(&format!("{name}.{i}"), if i == 0 { d } else { ff }, ff))
            .collect();
        Ffn {
            hidden,
            out: self.linear(&format!("{name}.out"), ff, d),
        }
    }
}

/// Trainable element count of `genome` on `m` features, from layer sizes
/// alone. With `d = 2m`, `f = dim_feedforward`, `L = ffn_layers` and input
/// width `i = m` (or `2m` when a condition channel is present):
///
/// ```text
/// embedding      i*d + d              (linear embedding only)
/// input norm     2d
/// ffn            d*f + f + (L-1)(f*f + f) + f*d + d
/// encoder layer  4(d*d + d) + 4d + ffn
/// decoder layer  8(d*d + d) + 6d + ffn
/// decoder head   d*m + m              (per decoder)
/// ```
pub fn parameter_count_formula(genome: &Genome, m: usize) -> usize {
    let d = 2 * m;
    let f = genome.dim_feedforward;
    let input = if genome.has_condition() { 2 * m } else { m };
    let embed = if genome.use_linear_embedding { input * d + d } else { 0 };
    let ffn = d * f + f + (genome.ffn_layers - 1) * (f * f + f) + f * d + d;
    let enc = 4 * (d * d + d) + 4 * d + ffn;
    let dec = 8 * (d * d + d) + 6 * d + ffn;
    let decoders = genome.decoder_count();
    embed + 2 * d + genome.encoder_layers * enc + decoders * (genome.decoder_layers * dec + d * m + m)
}

/// Dropout randomness and batch-statistics bookkeeping for one forward pass.
/// An evaluation context disables dropout and uses running statistics.
pub struct Context<'a> {
    rng: Option<&'a mut dyn RngCore>,
    updates: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Context<'static> {
    pub fn eval() -> Self {
        Context {
            rng: None,
            updates: Vec::new(),
        }
    }
}

impl<'a> Context<'a> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Context {
            rng: Some(rng),
            updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => g.dropout(x, p, rng),
            None => x,
        }
    }
}

/// Graph handles of one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head attention with queries projected from `x_q` and keys and
/// values from `x_kv`, over `windows` independent row blocks; the
/// concatenated heads pass through the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &AttentionVars,
    x_q: Var,
    x_kv: Var,
    windows: usize,
    heads: usize,
) -> Result<Var> {
    let q = g.linear(x_q, p.wq, p.bq)?;
    let k = g.linear(x_kv, p.wk, p.bk)?;
    let v = g.linear(x_kv, p.wv, p.bv)?;
    let h = g.attention(q, k, v, windows, heads)?;
    g.linear(h, p.wo, p.bo)
}

/// Outputs of [`AnomalyModel::forward`].
#[derive(Debug, Clone, Copy)]
pub enum Reconstructions {
    /// One reconstruction: 1phase without self-conditioning, or one
    /// iterative step.
    Single(Var),
    /// 1phase with self-conditioning: a pass with a zero condition, then a
    /// pass conditioned on its focus score.
    SelfConditioned { first: Var, output: Var },
    /// 2phase: the zero-condition reconstruction, then both decoders on the
    /// focus-conditioned encoding.
    TwoPhase { initial: Var, adv1: Var, adv2: Var },
}

impl Reconstructions {
    /// The two reconstructions entering the anomaly score. Pathways with a
    /// single decoder use their final reconstruction twice.
    pub fn score_pair(&self) -> (Var, Var) {
        match *self {
            Reconstructions::Single(o) => (o, o),
            Reconstructions::SelfConditioned { output, .. } => (output, output),
            Reconstructions::TwoPhase { initial, adv1, .. } => (initial, adv1),
        }
    }
}

impl AnomalyModel {
    /// Builds and initializes a model for `m` features. Weights and any
    /// random positional frequencies are drawn from `seed`.
    pub fn build(genome: &Genome, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Contract("feature count must be at least 1".into()));
        }
        genome.validate_for(m)?;
        let d = 2 * m;
        let kind = genome.norm_type;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            names: Vec::new(),
            stats: Vec::new(),
        };
        let input = if genome.has_condition() { 2 * m } else { m };
        let embed = genome.use_linear_embedding.then(|| b.linear("embed", input, d));
        let input_norm = b.norm("input_norm", d, kind);
        let (ff, fl) = (genome.dim_feedforward, genome.ffn_layers);
        let encoder = (0..genome.encoder_layers)
            .map(|l| {
                let n = format!("encoder.{l}");
                EncoderLayer {
                    attn: b.attention(&format!("{n}.attn"), d),
                    norm1: b.norm(&format!("{n}.norm1"), d, kind),
                    ffn: b.ffn(&format!("{n}.ffn"), d, ff, fl),
                    norm2: b.norm(&format!("{n}.norm2"), d, kind),
                }
            })
            .collect();
        let decoders = (0..genome.decoder_count())
            .map(|i| {
                let layers = (0..genome.decoder_layers)
                    .map(|l| {
                        let n = format!("decoder{i}.{l}");
                        DecoderLayer {
                            self_attn: b.attention(&format!("{n}.self_attn"), d),
                            norm1: b.norm(&format!("{n}.norm1"), d, kind),
                            cross: b.attention(&format!("{n}.cross"), d),
                            norm2: b.norm(&format!("{n}.norm2"), d, kind),
                            ffn: b.ffn(&format!("{n}.ffn"), d, ff, fl),
                            norm3: b.norm(&format!("{n}.norm3"), d, kind),
                        }
                    })
                    .collect();
                Decoder {
                    layers,
                    out: b.linear(&format!("decoder{i}.out"), d, m),
                }
            })
            .collect();
        let pos_seed = b.rng.next_u64();
        let pos = positional_encoding(genome.pos_encoding, genome.window_size, d, pos_seed);
        Ok(AnomalyModel {
            genome: genome.clone(),
            m,
            d,
            seed,
            params: b.params,
            names: b.names,
            stats: b.stats,
            layout: Layout {
                embed,
                input_norm,
                encoder,
                decoders,
            },
            pos,
        })
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn feature_count(&self) -> usize {
        self.m
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn window_size(&self) -> usize {
        self.genome.window_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn decoder_count(&self) -> usize {
        self.layout.decoders.len()
    }

    pub fn has_condition(&self) -> bool {
        self.genome.has_condition()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Trainable tensors in declaration order.
    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.pos
    }

    /// Registers every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Folds the batch statistics gathered by a training context into the
    /// running statistics.
    pub fn absorb_statistics(&mut self, ctx: Context<'_>) {
        for (slot, mean, var) in ctx.updates {
            let s = &mut self.stats[slot];
            for (r, b) in s.mean.iter_mut().zip(&mean) {
                *r = (1.0 - STATS_MOMENTUM) * *r + STATS_MOMENTUM * b;
            }
            for (r, b) in s.var.iter_mut().zip(&var) {
                *r = (1.0 - STATS_MOMENTUM) * *r + STATS_MOMENTUM * b;
            }
        }
    }

    /// Number of windows stacked in `x`, after checking its shape.
    pub fn windows_in(&self, shape: [usize; 2]) -> Result<usize> {
        let k = self.window_size();
        if shape[1] != self.m || shape[0] == 0 || !shape[0].is_multiple_of(k) {
            return Err(Error::dim("model input", &shape, &[k, self.m]));
        }
        Ok(shape[0] / k)
    }

    fn norm(&self, g: &mut Graph, p: &[Var], n: &Norm, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let kind = self.genome.norm_type;
        match n.stats {
            Some(slot) if !ctx.is_training() => {
                let s = &self.stats[slot];
                g.norm_fixed(x, p[n.gamma], p[n.beta], &s.mean, &s.var, NORM_EPS)
            }
            slot => {
                let y = g.norm(x, p[n.gamma], p[n.beta], kind, self.window_size(), NORM_EPS)?;
                if let (Some(slot), Some((mean, var))) = (slot, g.norm_statistics(y)) {
                    ctx.updates.push((slot, mean.to_vec(), var.to_vec()));
                }
                Ok(y)
            }
        }
    }

    fn attention(&self, g: &mut Graph, p: &[Var], a: &Attention, xq: Var, xkv: Var, windows: usize) -> Result<Var> {
        let vars = AttentionVars {
            wq: p[a.q.w],
            bq: p[a.q.b],
            wk: p[a.k.w],
            bk: p[a.k.b],
            wv: p[a.v.w],
            bv: p[a.v.b],
            wo: p[a.o.w],
            bo: p[a.o.b],
        };
        multi_head_attention(g, &vars, xq, xkv, windows, self.genome.n_heads)
    }

    fn ffn(&self, g: &mut Graph, p: &[Var], f: &Ffn, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let mut h = x;
        for l in &f.hidden {
            h = g.linear(h, p[l.w], p[l.b])?;
            h = g.activation(h, self.genome.activation);
            h = ctx.dropout(g, h, self.genome.dropout);
        }
        g.linear(h, p[f.out.w], p[f.out.b])
    }

    /// Embedding, input normalization and positional encoding.
    fn embed(&self, g: &mut Graph, p: &[Var], x: Var, cond: Option<Var>, windows: usize, ctx: &mut Context<'_>) -> Result<Var> {
        let input = match cond {
            Some(c) => g.concat_cols(x, c)?,
            None => x,
        };
        let e = match self.layout.embed {
            Some(l) => g.linear(input, p[l.w], p[l.b])?,
            None if cond.is_some() => input,
            None => g.concat_cols(x, x)?,
        };
        let e = self.norm(g, p, &self.layout.input_norm, e, ctx)?;
        let parts = vec![&self.pos; windows];
        let pos = g.constant(Tensor::vstack(&parts)?);
        g.add(e, pos)
    }

    fn encode(&self, g: &mut Graph, p: &[Var], emb: Var, windows: usize, ctx: &mut Context<'_>) -> Result<Var> {
        let mut h = emb;
        for layer in &self.layout.encoder {
            let a = self.attention(g, p, &layer.attn, h, h, windows)?;
            let a = ctx.dropout(g, a, self.genome.dropout);
            let s = g.add(h, a)?;
            h = self.norm(g, p, &layer.norm1, s, ctx)?;
            let f = self.ffn(g, p, &layer.ffn, h, ctx)?;
            let s = g.add(h, f)?;
            h = self.norm(g, p, &layer.norm2, s, ctx)?;
        }
        Ok(h)
    }

    fn decode(&self, g: &mut Graph, p: &[Var], which: usize, tgt: Var, memory: Var, windows: usize, ctx: &mut Context<'_>) -> Result<Var> {
        let dec = &self.layout.decoders[which];
        let mut h = tgt;
        for layer in &dec.layers {
            let a = self.attention(g, p, &layer.self_attn, h, h, windows)?;
            let a = ctx.dropout(g, a, self.genome.dropout);
            let s = g.add(h, a)?;
            h = self.norm(g, p, &layer.norm1, s, ctx)?;
            let c = self.attention(g, p, &layer.cross, h, memory, windows)?;
            let c = ctx.dropout(g, c, self.genome.dropout);
            let s = g.add(h, c)?;
            h = self.norm(g, p, &layer.norm2, s, ctx)?;
            let f = self.ffn(g, p, &layer.ffn, h, ctx)?;
            let s = g.add(h, f)?;
            h = self.norm(g, p, &layer.norm3, s, ctx)?;
        }
        let o = g.linear(h, p[dec.out.w], p[dec.out.b])?;
        Ok(g.sigmoid(o))
    }

    /// Embeds and encodes once, then runs each listed decoder with the
    /// embedded input as its target sequence.
    fn pass(&self, g: &mut Graph, p: &[Var], x: Var, cond: Option<Var>, decoders: &[usize], ctx: &mut Context<'_>) -> Result<Vec<Var>> {
        let windows = self.windows_in(g.shape(x))?;
        let cond = match (self.has_condition(), cond) {
            (true, Some(c)) => {
                if g.shape(c) != g.shape(x) {
                    return Err(Error::dim("condition", &g.shape(c), &g.shape(x)));
                }
                Some(c)
            }
            (true, None) => {
                let [r, c] = g.shape(x);
                Some(g.constant(Tensor::zeros(r, c)))
            }
            (false, Some(_)) => {
                return Err(Error::Contract("this genome has no condition channel".into()));
            }
            (false, None) => None,
        };
        let emb = self.embed(g, p, x, cond, windows, ctx)?;
        let memory = self.encode(g, p, emb, windows, ctx)?;
        decoders
            .iter()
            .map(|&i| self.decode(g, p, i, emb, memory, windows, ctx))
            .collect()
    }

    /// Elementwise squared deviation of a reconstruction from the input.
    pub fn focus(g: &mut Graph, reconstruction: Var, x: Var) -> Result<Var> {
        let diff = g.sub(reconstruction, x)?;
        Ok(g.square(diff))
    }

    /// Runs the pathway of the genome's phase type on stacked windows `x`
    /// (`n*K x m`) with parameters `p` from [`AnomalyModel::bind`]. `cond` is
    /// accepted only by the iterative pathway, whose caller supplies the
    /// previous step's focus score (zeros when absent).
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, cond: Option<Var>, ctx: &mut Context<'_>) -> Result<Reconstructions> {
        if p.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for a model with {}",
                p.len(),
                self.params.len()
            )));
        }
        if cond.is_some() && self.genome.phase_type != PhaseType::Iterative {
            return Err(Error::Contract("only the iterative pathway takes an external condition".into()));
        }
        match self.genome.phase_type {
            PhaseType::Iterative => Ok(Reconstructions::Single(self.pass(g, p, x, cond, &[0], ctx)?[0])),
            PhaseType::OnePhase if !self.genome.self_conditioning => {
                Ok(Reconstructions::Single(self.pass(g, p, x, None, &[0], ctx)?[0]))
            }
            PhaseType::OnePhase => {
                let first = self.pass(g, p, x, None, &[0], ctx)?[0];
                let focus = Self::focus(g, first, x)?;
                let output = self.pass(g, p, x, Some(focus), &[0], ctx)?[0];
                Ok(Reconstructions::SelfConditioned { first, output })
            }
            PhaseType::TwoPhase => {
                let initial = self.pass(g, p, x, None, &[0], ctx)?[0];
                let focus = Self::focus(g, initial, x)?;
                let adv = self.pass(g, p, x, Some(focus), &[0, 1], ctx)?;
                Ok(Reconstructions::TwoPhase {
                    initial,
                    adv1: adv[0],
                    adv2: adv[1],
                })
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::Activation;
    use crate::model::genome::{AttentionKind, PosEncoding};

    pub(crate) fn genome(m: usize, phase: PhaseType) -> Genome {
        Genome {
            learning_rate: 1e-3,
            dropout: 0.1,
            batch_size: 16,
            gaussian_noise: 1e-3,
            time_warping: false,
            time_masking: false,
            window_size: 10,
            pos_encoding: PosEncoding::Sinusoidal,
            dim_feedforward: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            activation: Activation::Tanh,
            attention: AttentionKind::ScaledDotProduct,
            n_heads: m,
            use_linear_embedding: true,
            norm_type: NormKind::Layer,
            self_conditioning: false,
            ffn_layers: 1,
            phase_type: phase,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn smallest_model_has_187_parameters() {
        let g = genome(1, PhaseType::OnePhase);
        let model = AnomalyModel::build(&g, 1, 0).unwrap();
        // enumerate tensor shapes by hand: embed 1x2+1x2, input norm 2+2,
        // encoder attention 4*(2x2+2) + norms 2*4 + ffn (2x8+8+8x2+2),
        // decoder attention 8*(2x2+2) + norms 3*4 + ffn 42, head 2x1+1
        let by_hand = (2 + 2) + 4 + (24 + 8 + 42) + (48 + 12 + 42) + 3;
        assert_eq!(by_hand, 187);
        assert_eq!(model.parameter_count(), 187);
        assert_eq!(parameter_count_formula(&g, 1), 187);
    }

    #[test]
    fn decoder_count_follows_phase() {
        for (phase, n) in [(PhaseType::OnePhase, 1), (PhaseType::TwoPhase, 2), (PhaseType::Iterative, 1)] {
            let g = genome(2, phase);
            let model = AnomalyModel::build(&g, 2, 1).unwrap();
            assert_eq!(model.decoder_count(), n);
            assert_eq!(model.parameter_count(), parameter_count_formula(&g, 2));
        }
    }

    #[test]
    fn head_count_must_match_features() {
        let g = genome(2, PhaseType::OnePhase);
        assert!(matches!(AnomalyModel::build(&g, 3, 0), Err(Error::Validation { field: "n_heads", .. })));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for k in [10, 30] {
            for m in [1, 5] {
                let mut g = genome(m, PhaseType::OnePhase);
                g.window_size = k;
                let model = AnomalyModel::build(&g, m, 7).unwrap();
                let x = random_input(2 * k, m, 1);
                let run = || {
                    let mut gr = Graph::new();
                    let p = model.bind(&mut gr, false);
                    let xv = gr.constant(x.clone());
                    let out = model.forward(&mut gr, &p, xv, None, &mut Context::eval()).unwrap();
                    gr.value(out.score_pair().0).clone()
                };
                let a = run();
                assert_eq!(a.shape(), [2 * k, m]);
                assert_eq!(a, run());
            }
        }
    }

    #[test]
    fn two_phase_focus_matches_recomputation() {
        let g = genome(2, PhaseType::TwoPhase);
        let model = AnomalyModel::build(&g, 2, 3).unwrap();
        let x = random_input(10, 2, 4);
        let mut gr = Graph::new();
        let p = model.bind(&mut gr, false);
        let xv = gr.constant(x.clone());
        let Reconstructions::TwoPhase { initial, adv1, adv2 } =
            model.forward(&mut gr, &p, xv, None, &mut Context::eval()).unwrap()
        else {
            panic!("expected two-phase outputs");
        };
        let o = gr.value(initial).clone();
        let focus = o.zip_map(&x, |a, b| (a - b) * (a - b));
        // rerun the second pass by hand through the iterative entry point of
        // an otherwise identical model
        let mut it = g.clone();
        it.phase_type = PhaseType::Iterative;
        let mut twin = AnomalyModel::build(&it, 2, 3).unwrap();
        let n = twin.parameters().len();
        twin.parameters_mut().clone_from_slice(&model.parameters()[..n]);
        let mut g2 = Graph::new();
        let p2 = twin.bind(&mut g2, false);
        let x2 = g2.constant(x);
        let c2 = g2.constant(focus);
        let out = twin.forward(&mut g2, &p2, x2, Some(c2), &mut Context::eval()).unwrap();
        assert_eq!(g2.value(out.score_pair().0), gr.value(adv1));
        assert_ne!(gr.value(adv1), gr.value(adv2));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for norm in NormKind::ALL {
            for phase in [PhaseType::OnePhase, PhaseType::TwoPhase, PhaseType::Iterative] {
                let mut g = genome(2, phase);
                g.norm_type = norm;
                g.ffn_layers = 2;
                g.self_conditioning = true;
                let model = AnomalyModel::build(&g, 2, 11).unwrap();
                let x = random_input(30, 2, 12);
                let mut gr = Graph::new();
                let p = model.bind(&mut gr, true);
                let xv = gr.constant(x.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = Context::train(&mut rng);
                let out = model.forward(&mut gr, &p, xv, None, &mut ctx).unwrap();
                let mut loss = None;
                let (r1, r2) = out.score_pair();
                for r in [r1, r2] {
                    let l = gr.mse(r, xv).unwrap();
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => gr.add(acc, l).unwrap(),
                    });
                }
                if let Reconstructions::TwoPhase { adv2, .. } = out {
                    let l = gr.mse(adv2, xv).unwrap();
                    loss = Some(gr.add(loss.unwrap(), l).unwrap());
                }
                gr.backward(loss.unwrap()).unwrap();
                for (i, v) in p.iter().enumerate() {
                    let grad = gr.grad(*v).expect("gradient present");
                    assert!(
                        grad.data().iter().any(|x| *x != 0.0),
                        "{norm:?} {phase:?}: {} has zero gradient",
                        model.parameter_names()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn batch_norm_tracks_running_statistics() {
        let mut g = genome(2, PhaseType::OnePhase);
        g.norm_type = NormKind::Batch;
        let mut model = AnomalyModel::build(&g, 2, 0).unwrap();
        assert_eq!(model.running_stats().len(), 1 + 2 + 3);
        let x = random_input(20, 2, 1);
        let mut gr = Graph::new();
        let p = model.bind(&mut gr, true);
        let xv = gr.constant(x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Context::train(&mut rng);
        model.forward(&mut gr, &p, xv, None, &mut ctx).unwrap();
        model.absorb_statistics(ctx);
        assert!(model.running_stats()[0].var.iter().all(|v| *v != 1.0));
    }

    #[test]
    fn single_key_attention_returns_projected_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand = |r, c| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, ws) = (rand(1, 4), (0..8).map(|i| if i % 2 == 0 { rand(4, 4) } else { rand(1, 4) }).collect::<Vec<_>>());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let v: Vec<Var> = ws.iter().map(|t| g.constant(t.clone())).collect();
        let p = AttentionVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
        };
        let out = multi_head_attention(&mut g, &p, xv, xv, 1, 1).unwrap();
        let values = x.matmul(&ws[4]).unwrap().zip_map(&ws[5], |a, b| a + b);
        let expect = values.matmul(&ws[6]).unwrap().zip_map(&ws[7], |a, b| a + b);
        for (a, b) in g.value(out).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
