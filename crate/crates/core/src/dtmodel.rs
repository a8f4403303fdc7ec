//! Prompt-conditioned causal transformer over interleaved
//! (reward-to-go, state, action) tokens.
//!
//! Each step contributes three tokens. A token's embedding is its modality
//! projection plus a timestep embedding plus a block embedding that tells
//! prompt steps from history steps. A pre-norm GPT stack runs over the whole
//! sequence under a causal mask that also hides padding, and the hidden
//! state at every state token is mapped through `tanh` to an action.
//!
//! The forward pass is generic over [`Real`] so that the loss can be
//! gradient-checked in `f64`; training and inference use `f32`.

use std::path::{Path, PathBuf};

use ptdt_diffcore::{DiffError, Gradients, Graph, NdArray, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, sha256_hex, write_bytes, write_json};
use crate::trajdata::{History, PromptSegment, SequenceBatch};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    pub activation: Activation,
    /// History context length.
    pub k: usize,
    /// Prompt length; `0` gives the prompt-free ablation.
    pub k_star: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub d_r: usize,
    /// Size of the timestep embedding table.
    pub max_timestep: usize,
    /// Hidden width of the feed-forward block, as a multiple of `d_embed`.
    pub mlp_ratio: usize,
    /// Also train on action predictions at prompt steps.
    pub prompt_loss: bool,
}

impl ModelConfig {
    /// Architecture from the reference hyperparameter table.
    pub fn reference(d_s: usize, d_a: usize, max_timestep: usize) -> Self {
        Self {
            n_layers: 3,
            n_heads: 1,
            d_embed: 128,
            activation: Activation::Relu,
            k: 20,
            k_star: 5,
            d_s,
            d_a,
            d_r: 1,
            max_timestep,
            mlp_ratio: 4,
            prompt_loss: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_embed % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_embed {} is not divisible by n_heads {}",
                self.d_embed, self.n_heads
            )));
        }
        if self.k == 0 || self.n_layers == 0 || self.d_s == 0 || self.d_a == 0 || self.max_timestep == 0 {
            return Err(Error::Contract(format!("degenerate model config {self:?}")));
        }
        if self.d_r != 1 {
            return Err(Error::Contract("reward-to-go tokens are scalar (d_r = 1)".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.k_star + self.k
    }
}

/// Input scaling fitted to the pretraining data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
    /// Reward-to-go values are divided by this.
    pub rtg_scale: f32,
}

impl Normalizer {
    pub fn identity(d_s: usize) -> Self {
        Self {
            state_mean: vec![0.0; d_s],
            state_std: vec![1.0; d_s],
            rtg_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter, in storage order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_embed;
    let h = cfg.mlp_ratio * d;
    let mut specs = vec![
        ("embed.rtg.w".to_string(), vec![cfg.d_r, d], Init::Normal),
        ("embed.rtg.b".into(), vec![d], Init::Zeros),
        ("embed.state.w".into(), vec![cfg.d_s, d], Init::Normal),
        ("embed.state.b".into(), vec![d], Init::Zeros),
        ("embed.action.w".into(), vec![cfg.d_a, d], Init::Normal),
        ("embed.action.b".into(), vec![d], Init::Zeros),
        ("embed.timestep".into(), vec![cfg.max_timestep, d], Init::Normal),
        ("embed.block".into(), vec![2, d], Init::Normal),
        ("embed.ln.g".into(), vec![d], Init::Ones),
        ("embed.ln.b".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        specs.extend([
            (format!("{p}.ln1.g"), vec![d], Init::Ones),
            (format!("{p}.ln1.b"), vec![d], Init::Zeros),
            (format!("{p}.attn.qkv.w"), vec![d, 3 * d], Init::Normal),
            (format!("{p}.attn.qkv.b"), vec![3 * d], Init::Zeros),
            (format!("{p}.attn.proj.w"), vec![d, d], Init::Normal),
            (format!("{p}.attn.proj.b"), vec![d], Init::Zeros),
            (format!("{p}.ln2.g"), vec![d], Init::Ones),
            (format!("{p}.ln2.b"), vec![d], Init::Zeros),
            (format!("{p}.mlp.fc.w"), vec![d, h], Init::Normal),
            (format!("{p}.mlp.fc.b"), vec![h], Init::Zeros),
            (format!("{p}.mlp.proj.w"), vec![h, d], Init::Normal),
            (format!("{p}.mlp.proj.b"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("ln_f.g".to_string(), vec![d], Init::Ones),
        ("ln_f.b".into(), vec![d], Init::Zeros),
        ("head.w".into(), vec![d, cfg.d_a], Init::Normal),
        ("head.b".into(), vec![cfg.d_a], Init::Zeros),
    ]);
    specs
}

/// All trainable tensors of a model, in the fixed order of the parameter
/// specification.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<NdArray<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Weights drawn from N(0, 0.02), biases and norm offsets zero, norm
    /// gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in param_specs(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            names.push(name);
            tensors.push(NdArray::new(shape, data)?);
        }
        Ok(Self { names, tensors })
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(NdArray::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(NdArray::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(NdArray::is_finite)
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn on_graph(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Gradients for the leaves returned by [`Self::on_graph`].
    pub fn collect_grads(grads: &Gradients<T>, vars: &[Var]) -> Result<Vec<NdArray<T>>> {
        vars.iter().map(|&v| grads.get(v).map_err(Error::from)).collect()
    }
}

/// Hands out parameter vars in storage order.
struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn matrix<T: Real>(rows: usize, cols: usize, data: Vec<T>) -> Result<NdArray<T>> {
    Ok(NdArray::new(vec![rows, cols], data)?)
}

/// Additive attention mask `[B, N, N]`: a token sees itself and earlier
/// tokens that are not padding.
fn attention_mask<T: Real>(batch: &SequenceBatch) -> Result<NdArray<T>> {
    let l = batch.steps();
    let n = 3 * l;
    let mut mask = vec![T::neg_infinity(); batch.batch * n * n];
    for b in 0..batch.batch {
        let key_ok: Vec<bool> = (0..n)
            .map(|j| {
                let step = b * l + j / 3;
                batch.valid[step] && (j % 3 != 2 || batch.has_action[step])
            })
            .collect();
        for i in 0..n {
            let row = &mut mask[(b * n + i) * n..(b * n + i + 1) * n];
            for j in 0..=i {
                if key_ok[j] {
                    row[j] = T::zero();
                }
            }
        }
    }
    Ok(NdArray::new(vec![batch.batch, n, n], mask)?)
}

fn check_batch(cfg: &ModelConfig, batch: &SequenceBatch) -> Result<()> {
    if batch.batch == 0
        || batch.k_star != cfg.k_star
        || batch.k != cfg.k
        || batch.d_s != cfg.d_s
        || batch.d_a != cfg.d_a
    {
        return Err(DiffError::shape(
            "model_forward",
            &[cfg.k_star, cfg.k, cfg.d_s, cfg.d_a],
            &[batch.k_star, batch.k, batch.d_s, batch.d_a],
        )
        .into());
    }
    if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
        return Err(Error::Contract(format!(
            "timestep {t} exceeds the embedding table ({})",
            cfg.max_timestep
        )));
    }
    Ok(())
}

/// Records the forward pass on `g` and returns predicted actions, one row
/// per step: `[B * (K* + K), d_a]`. If `rows` is given, only those step
/// rows are predicted, in that order.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    vars: &[Var],
    cfg: &ModelConfig,
    norm: &Normalizer,
    batch: &SequenceBatch,
    rows: Option<&[usize]>,
) -> Result<Var> {
    check_batch(cfg, batch)?;
    let (d, d_s, d_a) = (cfg.d_embed, cfg.d_s, cfg.d_a);
    let l = batch.steps();
    let bl = batch.batch * l;
    let n = 3 * l;
    let mut p = Cursor { vars, next: 0 };

    let rtg = batch
        .rtg
        .iter()
        .map(|&r| T::from_f32(r / norm.rtg_scale))
        .collect();
    let states = batch
        .states
        .chunks(d_s)
        .flat_map(|s| (0..d_s).map(move |i| T::from_f32((s[i] - norm.state_mean[i]) / norm.state_std[i])))
        .collect();
    let actions = batch.actions.iter().map(|&a| T::from_f32(a)).collect();
    let rtg = g.constant(matrix(bl, 1, rtg)?);
    let states = g.constant(matrix(bl, d_s, states)?);
    let actions = g.constant(matrix(bl, d_a, actions)?);

    let (rw, rb, sw, sb, aw, ab) = (p.take(), p.take(), p.take(), p.take(), p.take(), p.take());
    let (time_table, block_table) = (p.take(), p.take());
    let (eg, eb) = (p.take(), p.take());

    let time = g.embedding(time_table, &batch.timesteps)?;
    let blocks: Vec<usize> = (0..bl).map(|i| usize::from(i % l >= batch.k_star)).collect();
    let block = g.embedding(block_table, &blocks)?;
    let position = g.add(time, block)?;

    let mut embed = |x: Var, w: Var, b: Var| -> Result<Var> {
        let e = g.matmul(x, w)?;
        let e = g.add_bias(e, b)?;
        Ok(g.add(e, position)?)
    };
    let er = embed(rtg, rw, rb)?;
    let es = embed(states, sw, sb)?;
    let ea = embed(actions, aw, ab)?;
    let tokens = g.interleave_rows(&[er, es, ea])?;
    let mut x = g.layer_norm(tokens, eg, eb)?;

    let mask = attention_mask::<T>(batch)?;
    let dh = d / cfg.n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    for _ in 0..cfg.n_layers {
        let (g1, b1, qkv_w, qkv_b, proj_w, proj_b) = (p.take(), p.take(), p.take(), p.take(), p.take(), p.take());
        let (g2, b2, fc_w, fc_b, out_w, out_b) = (p.take(), p.take(), p.take(), p.take(), p.take(), p.take());

        let h = g.layer_norm(x, g1, b1)?;
        let qkv = g.matmul(h, qkv_w)?;
        let qkv = g.add_bias(qkv, qkv_b)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let shape = [batch.batch, n, dh];
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let q = g.reshape(q, &shape)?;
            let k = g.reshape(k, &shape)?;
            let v = g.reshape(v, &shape)?;
            let scores = g.bmm_nt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_masked(scores, &mask)?;
            let out = g.bmm(weights, v)?;
            heads.push(g.reshape(out, &[batch.batch * n, dh])?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = g.matmul(attn, proj_w)?;
        let attn = g.add_bias(attn, proj_b)?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, g2, b2)?;
        let h = g.matmul(h, fc_w)?;
        let h = g.add_bias(h, fc_b)?;
        let h = match cfg.activation {
            Activation::Relu => g.relu(h)?,
        };
        let h = g.matmul(h, out_w)?;
        let h = g.add_bias(h, out_b)?;
        x = g.add(x, h)?;
    }
    let (fg, fb, head_w, head_b) = (p.take(), p.take(), p.take(), p.take());
    let state_rows: Vec<usize> = match rows {
        Some(rows) => rows.iter().map(|&r| 3 * r + 1).collect(),
        None => (0..bl).map(|r| 3 * r + 1).collect(),
    };
    let x = g.select_rows(x, &state_rows)?;
    let x = g.layer_norm(x, fg, fb)?;
    let y = g.matmul(x, head_w)?;
    let y = g.add_bias(y, head_b)?;
    Ok(g.tanh(y)?)
}

/// Mean squared action error over steps with positive loss weight.
pub fn dt_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &[Var],
    cfg: &ModelConfig,
    norm: &Normalizer,
    batch: &SequenceBatch,
) -> Result<Var> {
    if !batch.loss_weight.iter().any(|&w| w > 0.0) {
        return Err(Error::Contract("batch has no step with a loss target".into()));
    }
    let pred = forward(g, vars, cfg, norm, batch, None)?;
    let rows = batch.batch * batch.steps();
    let target = NdArray::new(
        vec![rows, cfg.d_a],
        batch.actions.iter().map(|&a| T::from_f32(a)).collect(),
    )?;
    let weights: Vec<T> = batch.loss_weight.iter().map(|&w| T::from_f32(w)).collect();
    Ok(g.mse_rows(pred, &target, Some(&weights))?)
}

/// Provenance recorded with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub seed: u64,
    /// Content hash of the checkpoint this one was derived from.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// A trained model: configuration, input scaling and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub norm: Normalizer,
    pub params: ModelParams<f32>,
    pub lineage: Lineage,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    norm: Normalizer,
    lineage: Lineage,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self {
            config,
            norm,
            params,
            lineage: Lineage {
                seed,
                ..Lineage::default()
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Little-endian `f32` bytes of every tensor in order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.param_count());
        for t in &self.params.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the parameter blob.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.blob())
    }

    fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    /// Writes `<path>` (JSON manifest) and `<path>` with extension `bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = self.blob();
        let blob_path = Self::blob_path(path);
        let mut offset = 0;
        let tensors = self
            .params
            .names
            .iter()
            .zip(&self.params.tensors)
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes: 4 * t.len(),
                };
                offset += entry.bytes;
                entry
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            norm: self.norm.clone(),
            lineage: self.lineage.clone(),
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: sha256_hex(&blob),
            tensors,
        };
        write_bytes(&blob_path, &blob)?;
        write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        manifest.config.validate()?;
        let blob_path = path.with_file_name(&manifest.blob);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(Error::Data(format!("{} does not match its manifest hash", blob_path.display())));
        }
        let specs = param_specs(&manifest.config);
        if specs.len() != manifest.tensors.len() {
            return Err(Error::Data(format!(
                "manifest lists {} tensors, the configuration needs {}",
                manifest.tensors.len(),
                specs.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape, _), entry) in specs.into_iter().zip(manifest.tensors) {
            if name != entry.name || shape != entry.shape || entry.bytes != 4 * shape.iter().product::<usize>() {
                return Err(Error::Data(format!("tensor {} does not match the configuration", entry.name)));
            }
            let bytes = blob
                .get(entry.offset..entry.offset + entry.bytes)
                .ok_or_else(|| Error::Data(format!("tensor {} runs past the blob", entry.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            names.push(name);
            tensors.push(NdArray::new(shape, data)?);
        }
        Ok(Self {
            config: manifest.config,
            norm: manifest.norm,
            params: ModelParams { names, tensors },
            lineage: manifest.lineage,
        })
    }

    /// Actions for a batch of live sequences at their latest state.
    ///
    /// Every history must end with a state that has no action yet. The
    /// histories are trimmed to the last `K` steps here.
    pub fn act_batch(&self, prompts: &[&PromptSegment], histories: &[History]) -> Result<Vec<Vec<f32>>> {
        if prompts.len() != histories.len() || prompts.is_empty() {
            return Err(Error::Contract(format!(
                "{} prompts for {} histories",
                prompts.len(),
                histories.len()
            )));
        }
        let cfg = &self.config;
        let mut batch = SequenceBatch::new(cfg.k_star, cfg.k, cfg.d_s, cfg.d_a);
        for (prompt, history) in prompts.iter().zip(histories) {
            if history.n_actions() + 1 != history.len() {
                return Err(Error::Contract("history must end with a state awaiting an action".into()));
            }
            let mut h = history.clone();
            h.truncate_front(cfg.k);
            batch.push(prompt, &h, false)?;
        }
        let l = cfg.steps();
        let rows: Vec<usize> = (0..batch.batch).map(|b| b * l + l - 1).collect();
        let mut g = Graph::<f32>::new();
        let vars = self.params.on_graph(&mut g, false);
        let y = forward(&mut g, &vars, cfg, &self.norm, &batch, Some(&rows))?;
        Ok(g.value(y).data().chunks(cfg.d_a).map(<[f32]>::to_vec).collect())
    }

    /// Action for one live sequence.
    pub fn act(&self, prompt: &PromptSegment, history: &History) -> Result<Vec<f32>> {
        Ok(self.act_batch(&[prompt], std::slice::from_ref(history))?.remove(0))
    }

    /// Predicted actions at every step of `batch`, `[B * (K* + K)]` rows.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let vars = self.params.on_graph(&mut g, false);
        let y = forward(&mut g, &vars, &self.config, &self.norm, batch, None)?;
        Ok(g.value(y).to_vec())
    }

    /// Loss of `batch` under the current parameters, without gradients.
    pub fn loss(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let vars = self.params.on_graph(&mut g, false);
        let loss = dt_loss(&mut g, &vars, &self.config, &self.norm, batch)?;
        Ok(g.value(loss).data()[0] as f64)
    }
}

/// Random perturbation helper for tests and ablations: a copy of `prompt`
/// with Gaussian noise of scale `sigma` on every value.
pub fn jitter_prompt(prompt: &PromptSegment, sigma: f32, rng: &mut impl Rng) -> PromptSegment {
    let mut out = prompt.clone();
    let normal = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("valid std");
    for v in out.rtg.iter_mut().chain(out.states.iter_mut()).chain(out.actions.iter_mut()) {
        *v += normal.sample(rng);
    }
    out
}
