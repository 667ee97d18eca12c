//! Graph-attention VRNN.
//!
//! Per step `t`, with `h` the hidden state after step `t−1`:
//!
//! ```text
//! prior  = GNN_prior(h)
//! post   = GNN_enc([φx(x_t), h])
//! z      = μ_post + σ_post·ε            (teacher forcing)
//! recon  = GNN_dec([φz(z), h])
//! h      = GRU([φx(x_t), φz(z)], h)     (rows of absent agents keep their state)
//! ```
//!
//! Each GNN is a stack of graph blocks followed by linear heads for the mean
//! and the softplus standard deviation.

use std::collections::BTreeMap;

use camnet_autodiff::{ParamStore, Tape, Tensor, Var};
use camnet_core::metrics::PredictionSet;
use camnet_core::scenario::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ResidualMode};
use crate::features::{agent_noise, Batch, Point, Scene, StepGraph, OBS_DIM};
use crate::ModelError;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Scenes per tape when sampling.
const SAMPLE_CHUNK: usize = 16;

/// Parameter handles of one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
    }
}

/// Diagonal Gaussian living on a tape; both tensors are `[N, d]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Diagonal Gaussian with plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianDiag {
    /// `KL(self ‖ p)` in closed form.
    pub fn kl(&self, p: &GaussianDiag) -> Result<f64, ModelError> {
        if self.mean.len() != p.mean.len() || self.std.len() != self.mean.len() || p.std.len() != p.mean.len() {
            return Err(ModelError::Shape("kl_diag: dimensions differ".into()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(p.mean.iter().zip(&p.std))
            .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5)
            .sum())
    }
}

/// Row-wise `KL(q ‖ p)` summed over the last dimension, shape `[N]`.
pub fn kl_diag(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var, ModelError> {
    if tape.shape(q.mu) != tape.shape(p.mu) {
        return Err(ModelError::Shape(format!("kl_diag: {:?} vs {:?}", tape.shape(q.mu), tape.shape(p.mu))));
    }
    let lp = tape.log(p.sigma)?;
    let lq = tape.log(q.sigma)?;
    let dm = tape.sub(q.mu, p.mu)?;
    let dm2 = tape.square(dm)?;
    let sq2 = tape.square(q.sigma)?;
    let num = tape.add(sq2, dm2)?;
    let sp2 = tape.square(p.sigma)?;
    let den = tape.mul_scalar(sp2, 2.0)?;
    let ratio = tape.div(num, den)?;
    let l = tape.sub(lp, lq)?;
    let s = tape.add(l, ratio)?;
    let s = tape.add_scalar(s, -0.5)?;
    Ok(tape.sum_axis(s, 1)?)
}

/// Row-wise Gaussian log-density of `x`, shape `[N]`.
pub fn gaussian_log_prob(tape: &mut Tape, x: Var, g: GaussianVars) -> Result<Var, ModelError> {
    let d = tape.sub(x, g.mu)?;
    let z = tape.div(d, g.sigma)?;
    let z2 = tape.square(z)?;
    let a = tape.mul_scalar(z2, -0.5)?;
    let ls = tape.log(g.sigma)?;
    let b = tape.sub(a, ls)?;
    let c = tape.add_scalar(b, -HALF_LN_2PI)?;
    Ok(tape.sum_axis(c, 1)?)
}

/// Summed ELBO terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// `(β·Σ KL − Σ log p) · norm`.
    pub loss: Var,
    pub recon_sum: Var,
    pub kl_sum: Var,
    pub count: usize,
}

/// Values of the normalized ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub loss: f64,
    /// Mean reconstruction log-likelihood per valid agent-step.
    pub recon_ll: f64,
    /// Mean KL per valid agent-step.
    pub kl: f64,
    pub count: usize,
}

/// Sampled futures for every agent observed at the last observation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSamples {
    pub station_id: u32,
    pub focal: bool,
    /// `modes[m][step]`, world coordinates.
    pub modes: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSamples {
    pub scenario_id: String,
    pub agents: Vec<AgentSamples>,
}

impl ScenarioSamples {
    /// Focal-agent predictions against the scenario's ground truth.
    pub fn prediction_set(&self, s: &Scenario) -> Result<PredictionSet, ModelError> {
        let focal = s.focal().ok_or_else(|| ModelError::Data(format!("{}: no focal agent", s.id)))?;
        let pred = self
            .agents
            .iter()
            .find(|a| a.focal)
            .ok_or_else(|| ModelError::Data(format!("{}: focal agent was not sampled", s.id)))?;
        let (gt, valid) = focal.future();
        Ok(PredictionSet {
            scenario_id: s.id.clone(),
            station_id: focal.station_id,
            modes: pred.modes.clone(),
            gt,
            valid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub k: usize,
    pub seed: u64,
    /// Multiplies the prior standard deviation; 0 makes all rollouts equal.
    pub prior_scale: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { k: 6, seed: 0, prior_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamNet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            uniform(&mut self.rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = uniform(&mut self.rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.store.insert(name.to_string(), w);
    }
}

impl CamNet {
    pub fn new(config: ModelConfig) -> Result<CamNet, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.init_seed), store: &mut params };
        let (dh, dz) = (config.d_hidden, config.d_latent);
        init.linear("phi_x", OBS_DIM, dh, false);
        init.linear("phi_z", dz, dh, false);
        for gate in ["z", "r", "n"] {
            init.matrix(&format!("gru.w{gate}"), 2 * dh, dh);
            init.matrix(&format!("gru.u{gate}"), dh, dh);
            init.store.insert(format!("gru.b{gate}"), Tensor::zeros(&[dh]));
        }
        let nets = [
            ("prior", config.n_blocks_prior, dh, dz),
            ("enc", config.n_blocks_enc, 2 * dh, dz),
            ("dec", config.n_blocks_dec, 2 * dh, OBS_DIM),
        ];
        for (net, blocks, d_in, d_out) in nets {
            let mut width = d_in;
            for b in 0..blocks {
                width = Self::init_block(&config, &mut init, &format!("{net}.block{b}"), width);
            }
            init.linear(&format!("{net}.mu"), width, d_out, true);
            init.linear(&format!("{net}.sigma"), width, d_out, true);
        }
        Ok(CamNet { config, params })
    }

    /// Registers one graph block and returns its output width.
    fn init_block(cfg: &ModelConfig, init: &mut Init, p: &str, d_in: usize) -> usize {
        let dh = cfg.d_hidden;
        init.matrix(&format!("{p}.ws"), d_in, dh);
        init.matrix(&format!("{p}.wt"), d_in, dh);
        let head_dim = dh / cfg.heads;
        let att = uniform(&mut init.rng, &[dh], 1.0 / (head_dim as f64).sqrt());
        init.store.insert(format!("{p}.att"), att);
        init.linear(&format!("{p}.out"), dh, dh, false);
        let width = match cfg.residual {
            ResidualMode::Additive => {
                init.linear(&format!("{p}.res"), d_in, dh, false);
                dh
            }
            ResidualMode::Concat => {
                init.linear(&format!("{p}.res"), d_in, dh, false);
                2 * dh
            }
            ResidualMode::None => dh,
        };
        init.store.insert(format!("{p}.ln.g"), Tensor::full(&[width], 1.0));
        init.store.insert(format!("{p}.ln.b"), Tensor::zeros(&[width]));
        width
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<CamNet, ModelError> {
        let reference = CamNet::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(ModelError::Config("checkpoint has parameters the config does not define".into()));
        }
        Ok(CamNet { config, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound::new(self.params.bind(tape))
    }

    fn linear(&self, t: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
        let y = t.matmul(x, b.get(&format!("{name}.w"))?)?;
        Ok(t.add(y, b.get(&format!("{name}.b"))?)?)
    }

    /// `[d_hidden, heads]` indicator of which head owns each channel.
    fn head_indicator(&self, t: &mut Tape, transpose: bool) -> Var {
        let (dh, h) = (self.config.d_hidden, self.config.heads);
        let hd = dh / h;
        let mut data = vec![0.0; dh * h];
        for c in 0..dh {
            let idx = if transpose { (c / hd) * dh + c } else { c * h + c / hd };
            data[idx] = 1.0;
        }
        let shape = if transpose { vec![h, dh] } else { vec![dh, h] };
        t.constant(Tensor::new(shape, data).unwrap())
    }

    /// Multi-head GATv2 aggregation over the step graph, before the output map.
    pub fn gat_attention(&self, t: &mut Tape, b: &Bound, p: &str, x: Var, g: &StepGraph) -> Result<Var, ModelError> {
        let s = t.matmul(x, b.get(&format!("{p}.ws"))?)?;
        let tt = t.matmul(x, b.get(&format!("{p}.wt"))?)?;
        let sg = t.gather_rows(s, &g.src)?;
        let tg = t.gather_rows(tt, &g.dst)?;
        let e = t.add(sg, tg)?;
        let e = t.leaky_relu(e, self.config.leaky_slope)?;
        let ea = t.mul(e, b.get(&format!("{p}.att"))?)?;
        let ind = self.head_indicator(t, false);
        let logits = t.matmul(ea, ind)?;
        let alpha = t.segment_softmax(logits, &g.dst)?;
        let ind_t = self.head_indicator(t, true);
        let alpha_c = t.matmul(alpha, ind_t)?;
        let msg = t.mul(alpha_c, sg)?;
        Ok(t.scatter_add_rows(msg, &g.dst, g.n)?)
    }

    /// Attention, ELU, residual and layer norm.
    pub fn block(&self, t: &mut Tape, b: &Bound, p: &str, x: Var, g: &StepGraph) -> Result<Var, ModelError> {
        let agg = self.gat_attention(t, b, p, x, g)?;
        let o = self.linear(t, b, &format!("{p}.out"), agg)?;
        let a = t.elu(o)?;
        let y = match self.config.residual {
            ResidualMode::Additive => {
                let r = self.linear(t, b, &format!("{p}.res"), x)?;
                t.add(a, r)?
            }
            ResidualMode::Concat => {
                let r = self.linear(t, b, &format!("{p}.res"), x)?;
                t.concat(&[a, r], 1)?
            }
            ResidualMode::None => a,
        };
        let n = t.layer_norm(y, self.config.ln_eps)?;
        let n = t.mul(n, b.get(&format!("{p}.ln.g"))?)?;
        Ok(t.add(n, b.get(&format!("{p}.ln.b"))?)?)
    }

    fn gnn(&self, t: &mut Tape, b: &Bound, net: &str, blocks: usize, x: Var, g: &StepGraph) -> Result<GaussianVars, ModelError> {
        let mut h = x;
        for i in 0..blocks {
            h = self.block(t, b, &format!("{net}.block{i}"), h, g)?;
        }
        let mu = self.linear(t, b, &format!("{net}.mu"), h)?;
        let s = self.linear(t, b, &format!("{net}.sigma"), h)?;
        let s = t.softplus(s)?;
        let sigma = t.clamp_min(s, self.config.sigma_floor)?;
        Ok(GaussianVars { mu, sigma })
    }

    pub fn embed_x(&self, t: &mut Tape, b: &Bound, x: Var) -> Result<Var, ModelError> {
        self.linear(t, b, "phi_x", x)
    }

    pub fn embed_z(&self, t: &mut Tape, b: &Bound, z: Var) -> Result<Var, ModelError> {
        self.linear(t, b, "phi_z", z)
    }

    pub fn prior_step(&self, t: &mut Tape, b: &Bound, h_prev: Var, g: &StepGraph) -> Result<GaussianVars, ModelError> {
        self.gnn(t, b, "prior", self.config.n_blocks_prior, h_prev, g)
    }

    /// Posterior from embedded observations `ex = φx(x)`.
    pub fn encoder_step(&self, t: &mut Tape, b: &Bound, ex: Var, h_prev: Var, g: &StepGraph) -> Result<GaussianVars, ModelError> {
        let inp = t.concat(&[ex, h_prev], 1)?;
        self.gnn(t, b, "enc", self.config.n_blocks_enc, inp, g)
    }

    /// Observation distribution from embedded latents `ez = φz(z)`.
    pub fn decoder_step(&self, t: &mut Tape, b: &Bound, ez: Var, h_prev: Var, g: &StepGraph) -> Result<GaussianVars, ModelError> {
        let inp = t.concat(&[ez, h_prev], 1)?;
        self.gnn(t, b, "dec", self.config.n_blocks_dec, inp, g)
    }

    /// GRU update on `[ex, ez]`; rows never interact.
    pub fn rnn_step(&self, t: &mut Tape, b: &Bound, ex: Var, ez: Var, h_prev: Var) -> Result<Var, ModelError> {
        let inp = t.concat(&[ex, ez], 1)?;
        let gate = |t: &mut Tape, g: &str, h: Var| -> Result<Var, ModelError> {
            let a = t.matmul(inp, b.get(&format!("gru.w{g}"))?)?;
            let c = t.matmul(h, b.get(&format!("gru.u{g}"))?)?;
            let s = t.add(a, c)?;
            Ok(t.add(s, b.get(&format!("gru.b{g}"))?)?)
        };
        let zg = gate(t, "z", h_prev)?;
        let zg = t.sigmoid(zg)?;
        let rg = gate(t, "r", h_prev)?;
        let rg = t.sigmoid(rg)?;
        let wn = t.matmul(inp, b.get("gru.wn")?)?;
        let un = t.matmul(h_prev, b.get("gru.un")?)?;
        let run = t.mul(rg, un)?;
        let n = t.add(wn, run)?;
        let n = t.add(n, b.get("gru.bn")?)?;
        let n = t.tanh(n)?;
        // h' = (1 − z)·n + z·h
        let one_minus = t.neg(zg)?;
        let one_minus = t.add_scalar(one_minus, 1.0)?;
        let a = t.mul(one_minus, n)?;
        let c = t.mul(zg, h_prev)?;
        Ok(t.add(a, c)?)
    }

    /// `m·new + (1 − m)·old` with `m` a `[N, 1]` 0/1 mask.
    fn masked(&self, t: &mut Tape, new: Var, old: Var, mask: &Tensor) -> Result<Var, ModelError> {
        let m = t.constant(mask.clone());
        let inv = t.constant(Tensor::new(mask.shape().to_vec(), mask.data().iter().map(|v| 1.0 - v).collect()).unwrap());
        let a = t.mul(new, m)?;
        let c = t.mul(old, inv)?;
        Ok(t.add(a, c)?)
    }

    /// Teacher-forced ELBO over every step of `batch`; `noise[t]` is the
    /// `[N, d_latent]` reparameterization noise of step `t`.
    pub fn elbo_terms(
        &self,
        t: &mut Tape,
        b: &Bound,
        batch: &Batch,
        noise: &[Tensor],
        beta: f64,
        norm: f64,
    ) -> Result<ElboTerms, ModelError> {
        let n = batch.n;
        let mut h = t.constant(Tensor::zeros(&[n, self.config.d_hidden]));
        let mut recon = t.scalar(0.0);
        let mut kl = t.scalar(0.0);
        for step in 0..batch.steps {
            let g = &batch.graphs[step];
            let x = t.constant(batch.x[step].clone());
            let mrow = t.constant(batch.mask[step].clone().reshaped(vec![n]).unwrap());
            let prior = self.prior_step(t, b, h, g)?;
            let ex = self.embed_x(t, b, x)?;
            let post = self.encoder_step(t, b, ex, h, g)?;
            let eps = t.constant(noise[step].clone());
            let se = t.mul(post.sigma, eps)?;
            let z = t.add(post.mu, se)?;
            let ez = self.embed_z(t, b, z)?;
            let dec = self.decoder_step(t, b, ez, h, g)?;
            let ll = gaussian_log_prob(t, x, dec)?;
            let ll = t.mul(ll, mrow)?;
            let ll = t.sum(ll)?;
            recon = t.add(recon, ll)?;
            let k = kl_diag(t, post, prior)?;
            let k = t.mul(k, mrow)?;
            let k = t.sum(k)?;
            kl = t.add(kl, k)?;
            let hn = self.rnn_step(t, b, ex, ez, h)?;
            h = self.masked(t, hn, h, &batch.mask[step])?;
        }
        let bk = t.mul_scalar(kl, beta)?;
        let l = t.sub(bk, recon)?;
        let loss = t.mul_scalar(l, norm)?;
        Ok(ElboTerms { loss, recon_sum: recon, kl_sum: kl, count: batch.count })
    }

    /// Normalized ELBO of a set of scenarios under noise drawn from `noise_seed`.
    pub fn elbo(&self, scenarios: &[Scenario], beta: f64, noise_seed: u64) -> Result<ElboValue, ModelError> {
        let scenes = scenarios.iter().map(Scene::from_scenario).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Scene> = scenes.iter().collect();
        let batch = Batch::build(&refs, self.config.connectivity);
        let noise = crate::features::batch_noise(&refs, noise_seed, batch.steps, self.config.d_latent);
        self.elbo_value(&batch, &noise, beta)
    }

    pub fn elbo_value(&self, batch: &Batch, noise: &[Tensor], beta: f64) -> Result<ElboValue, ModelError> {
        if batch.count == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let mut t = Tape::new();
        let b = self.bind(&mut t);
        let norm = 1.0 / batch.count as f64;
        let terms = self.elbo_terms(&mut t, &b, batch, noise, beta, norm)?;
        let recon = t.value(terms.recon_sum).data()[0];
        let kl = t.value(terms.kl_sum).data()[0];
        Ok(ElboValue { loss: t.value(terms.loss).data()[0], recon_ll: recon * norm, kl: kl * norm, count: batch.count })
    }

    /// Observes the first `t_obs` steps, then rolls every agent present at
    /// the last observed step forward `k` times with latents from the prior
    /// and mean decoding.
    pub fn sample_trajectories(&self, scenarios: &[Scenario], opts: SampleOptions) -> Result<Vec<ScenarioSamples>, ModelError> {
        if opts.k == 0 {
            return Err(ModelError::Config("k must be positive".into()));
        }
        let scenes = scenarios.iter().map(Scene::from_scenario).collect::<Result<Vec<_>, _>>()?;
        let chunks: Vec<&[Scene]> = scenes.chunks(SAMPLE_CHUNK).collect();
        let out = chunks
            .par_iter()
            .map(|c| self.sample_scenes(c, opts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(out.into_iter().flatten().collect())
    }

    /// Same as [`CamNet::sample_trajectories`] on preprocessed scenes sharing one tape per step.
    pub fn sample_scenes(&self, scenes: &[Scene], opts: SampleOptions) -> Result<Vec<ScenarioSamples>, ModelError> {
        if opts.k == 0 {
            return Err(ModelError::Config("k must be positive".into()));
        }
        let cfg = &self.config;
        let (dh, dz) = (cfg.d_hidden, cfg.d_latent);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let batch = Batch::build(&refs, cfg.connectivity);
        let n = batch.n;

        // Observation window with posterior means.
        let mut h = Tensor::zeros(&[n, dh]);
        for step in 0..cfg.t_obs {
            let mut t = Tape::new();
            let b = self.bind(&mut t);
            let hv = t.constant(h);
            let x = t.constant(batch.x[step].clone());
            let ex = self.embed_x(&mut t, &b, x)?;
            let post = self.encoder_step(&mut t, &b, ex, hv, &batch.graphs[step])?;
            let ez = self.embed_z(&mut t, &b, post.mu)?;
            let hn = self.rnn_step(&mut t, &b, ex, ez, hv)?;
            let hm = self.masked(&mut t, hn, hv, &batch.mask[step])?;
            h = t.value(hm).clone();
        }

        // k block-diagonal copies; row = copy·n + batch row.
        let last = cfg.t_obs - 1;
        let rows = opts.k * n;
        let mut meta = Vec::with_capacity(rows);
        for c in 0..opts.k {
            for (s, scene) in scenes.iter().enumerate() {
                for a in 0..scene.n_agents() {
                    meta.push((c, s, a));
                }
            }
        }
        let active: Vec<bool> = meta.iter().map(|&(_, s, a)| scenes[s].valid[a][last]).collect();
        let mut pos: Vec<Point> = meta.iter().map(|&(_, s, a)| scenes[s].pos[a][last]).collect();
        let noise: Vec<Vec<f64>> = meta
            .iter()
            .map(|&(c, s, a)| agent_noise(opts.seed, &scenes[s].id, scenes[s].station_ids[a], c as u32, cfg.t_pred * dz))
            .collect();
        let mask = Tensor::new(vec![rows, 1], active.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut hk = Vec::with_capacity(rows * dh);
        for _ in 0..opts.k {
            hk.extend_from_slice(h.data());
        }
        let mut h = Tensor::new(vec![rows, dh], hk).unwrap();
        let mut tracks: Vec<Vec<Point>> = vec![Vec::with_capacity(cfg.t_pred); rows];

        for j in 0..cfg.t_pred {
            let mut g = StepGraph { n: rows, ..Default::default() };
            for c in 0..opts.k {
                for (s, scene) in scenes.iter().enumerate() {
                    let off = c * n + batch.offsets[s];
                    let na = scene.n_agents();
                    g.extend(cfg.connectivity, &pos[off..off + na], &active[off..off + na], off);
                }
            }
            g.finish();
            let mut t = Tape::new();
            let b = self.bind(&mut t);
            let hv = t.constant(h);
            let prior = self.prior_step(&mut t, &b, hv, &g)?;
            let mut eps = Vec::with_capacity(rows * dz);
            for stream in &noise {
                eps.extend_from_slice(&stream[j * dz..(j + 1) * dz]);
            }
            let eps = t.constant(Tensor::new(vec![rows, dz], eps).unwrap());
            let sd = t.mul_scalar(prior.sigma, opts.prior_scale)?;
            let se = t.mul(sd, eps)?;
            let z = t.add(prior.mu, se)?;
            let ez = self.embed_z(&mut t, &b, z)?;
            let dec = self.decoder_step(&mut t, &b, ez, hv, &g)?;
            let xhat = t.value(dec.mu).clone();
            for r in 0..rows {
                if active[r] {
                    let d = &xhat.data()[r * OBS_DIM..r * OBS_DIM + 2];
                    pos[r] = (pos[r].0 + d[0], pos[r].1 + d[1]);
                    tracks[r].push(pos[r]);
                }
            }
            let xv = t.constant(xhat);
            let ex = self.embed_x(&mut t, &b, xv)?;
            let hn = self.rnn_step(&mut t, &b, ex, ez, hv)?;
            let hm = self.masked(&mut t, hn, hv, &mask)?;
            h = t.value(hm).clone();
        }

        let mut out: Vec<ScenarioSamples> = scenes
            .iter()
            .map(|s| ScenarioSamples {
                scenario_id: s.id.clone(),
                agents: (0..s.n_agents())
                    .filter(|&a| s.valid[a][last])
                    .map(|a| AgentSamples { station_id: s.station_ids[a], focal: a == s.focal, modes: Vec::new() })
                    .collect(),
            })
            .collect();
        for (r, &(_, s, a)) in meta.iter().enumerate() {
            if !active[r] {
                continue;
            }
            let scene = &scenes[s];
            let world: Vec<Point> = tracks[r].iter().map(|p| scene.to_world(*p)).collect();
            let slot = out[s].agents.iter_mut().find(|x| x.station_id == scene.station_ids[a]).unwrap();
            slot.modes.push(world);
        }
        Ok(out)
    }
}
