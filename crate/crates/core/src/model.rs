//! The fusion network: per-stream projection, fusion block, stacked BiLSTM,
//! feed-forward head and per-frame sigmoid classifier.
//!
//! Parameter names are `<block>.<...>`, where block is one of `proj_mfcc`,
//! `proj_ptm`, `fusion`, `lstm` or `head`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Activation, Direction, Gradients, Graph, NodeId, ParamStore, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// MFCC stream only, feed-forward layer in place of fusion.
    NoneMfcc,
    /// PTM stream only, feed-forward layer in place of fusion.
    NonePtm,
    Concat,
    Add,
    /// Cross-attention: MFCC queries, PTM keys/values, residual + layer norm.
    Xattn,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] =
        [FusionMode::NoneMfcc, FusionMode::NonePtm, FusionMode::Concat, FusionMode::Add, FusionMode::Xattn];

    pub fn uses_mfcc(self) -> bool {
        self != FusionMode::NonePtm
    }

    pub fn uses_ptm(self) -> bool {
        self != FusionMode::NoneMfcc
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::NoneMfcc => "none-mfcc",
            FusionMode::NonePtm => "none-ptm",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::Xattn => "xattn",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-").to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_mfcc: usize,
    pub d_ptm: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl FusionConfig {
    /// Default widths: 128-wide projections and head, 2 heads, 2 BiLSTM layers of 128.
    pub fn new(mode: FusionMode, d_mfcc: usize, d_ptm: usize) -> Self {
        Self { mode, d_mfcc, d_ptm, d_model: 128, n_heads: 2, lstm_hidden: 128, lstm_layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.mode.uses_mfcc() && self.d_mfcc == 0 {
            return bad("d_mfcc must be at least 1".into());
        }
        if self.mode.uses_ptm() && self.d_ptm == 0 {
            return bad("d_ptm must be at least 1".into());
        }
        if self.d_model == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 || self.n_heads == 0 {
            return bad(format!("zero-sized dimension in {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.mode == FusionMode::Xattn && self.d_model < 2 {
            return bad("layer norm needs d_model >= 2".into());
        }
        Ok(())
    }
}

/// Per-frame speech probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub p: Vec<f64>,
    pub hop_ms: f64,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    LstmWeight,
    LstmBias,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn dense_slots(out: &mut Vec<Slot>, prefix: &str, din: usize, dout: usize) {
    out.push(Slot { name: format!("{prefix}.weight"), shape: vec![din, dout], init: Init::Xavier });
    out.push(Slot { name: format!("{prefix}.bias"), shape: vec![dout], init: Init::Zeros });
}

fn layout(cfg: &FusionConfig) -> Vec<Slot> {
    let dm = cfg.d_model;
    let h = cfg.lstm_hidden;
    let mut s = Vec::new();
    if cfg.mode.uses_mfcc() {
        dense_slots(&mut s, "proj_mfcc.0", cfg.d_mfcc, dm);
        dense_slots(&mut s, "proj_mfcc.1", dm, dm);
    }
    if cfg.mode.uses_ptm() {
        dense_slots(&mut s, "proj_ptm.0", cfg.d_ptm, dm);
        dense_slots(&mut s, "proj_ptm.1", dm, dm);
    }
    match cfg.mode {
        FusionMode::NoneMfcc | FusionMode::NonePtm => dense_slots(&mut s, "fusion.ff", dm, dm),
        FusionMode::Concat => dense_slots(&mut s, "fusion.concat", 2 * dm, dm),
        FusionMode::Add => {}
        FusionMode::Xattn => {
            for p in ["q", "k", "v", "o"] {
                s.push(Slot { name: format!("fusion.attn.w{p}"), shape: vec![dm, dm], init: Init::Xavier });
                s.push(Slot { name: format!("fusion.attn.b{p}"), shape: vec![dm], init: Init::Zeros });
            }
            s.push(Slot { name: "fusion.norm.gamma".into(), shape: vec![dm], init: Init::Ones });
            s.push(Slot { name: "fusion.norm.beta".into(), shape: vec![dm], init: Init::Zeros });
        }
    }
    for layer in 0..cfg.lstm_layers {
        let din = if layer == 0 { dm } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            let p = format!("lstm.{layer}.{dir}");
            s.push(Slot { name: format!("{p}.wx"), shape: vec![din, 4 * h], init: Init::LstmWeight });
            s.push(Slot { name: format!("{p}.wh"), shape: vec![h, 4 * h], init: Init::LstmWeight });
            s.push(Slot { name: format!("{p}.b"), shape: vec![4 * h], init: Init::LstmBias });
        }
    }
    dense_slots(&mut s, "head.0", 2 * h, dm);
    dense_slots(&mut s, "head.1", dm, dm);
    dense_slots(&mut s, "head.2", dm, 1);
    s
}

/// Freshly initialised parameters, deterministic in `seed`.
///
/// Dense and attention weights are uniform in ±√(6 / (fan_in + fan_out)),
/// LSTM weights uniform in ±1/√H with forget-gate bias 1, all other biases
/// zero, layer-norm gain one.
pub fn build_model<T: Real>(cfg: &FusionConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.lstm_hidden;
    let mut store = ParamStore::new();
    for slot in layout(cfg) {
        let n: usize = slot.shape.iter().product();
        let data: Vec<T> = match slot.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Xavier => {
                let a = (6.0 / (slot.shape[0] + slot.shape[1]) as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            }
            Init::LstmWeight => {
                let a = 1.0 / (h as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            }
            Init::LstmBias => (0..n).map(|i| if (h..2 * h).contains(&i) { T::one() } else { T::zero() }).collect(),
        };
        store.insert(slot.name, Tensor::new(slot.shape, data)?)?;
    }
    Ok(store)
}

/// Analytic trainable-parameter count, total and per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub blocks: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn block(&self, name: &str) -> usize {
        self.blocks.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }
}

pub fn count_params(cfg: &FusionConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let dense = |i: usize, o: usize| i * o + o;
    let (dm, h) = (cfg.d_model, cfg.lstm_hidden);
    let proj = |d: usize| dense(d, dm) + dense(dm, dm);
    let fusion = match cfg.mode {
        FusionMode::NoneMfcc | FusionMode::NonePtm => dense(dm, dm),
        FusionMode::Concat => dense(2 * dm, dm),
        FusionMode::Add => 0,
        FusionMode::Xattn => 4 * dense(dm, dm) + 2 * dm,
    };
    // per direction: 4H·(Din + H) weights + 4H bias
    let lstm: usize = (0..cfg.lstm_layers)
        .map(|l| {
            let din = if l == 0 { dm } else { 2 * h };
            2 * (4 * h * (din + h) + 4 * h)
        })
        .sum();
    let head = dense(2 * h, dm) + dense(dm, dm) + dense(dm, 1);
    let blocks = vec![
        ("proj_mfcc".to_string(), if cfg.mode.uses_mfcc() { proj(cfg.d_mfcc) } else { 0 }),
        ("proj_ptm".to_string(), if cfg.mode.uses_ptm() { proj(cfg.d_ptm) } else { 0 }),
        ("fusion".to_string(), fusion),
        ("lstm".to_string(), lstm),
        ("head".to_string(), head),
    ];
    Ok(ParamCount { total: blocks.iter().map(|(_, c)| c).sum(), blocks })
}

/// Node handles of interesting intermediate activations.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub proj_mfcc: Option<NodeId>,
    pub proj_ptm: Option<NodeId>,
    pub fused: NodeId,
    /// T×1 probabilities.
    pub probs: NodeId,
}

fn dense_p<T: Real>(g: &mut Graph<T>, x: NodeId, prefix: &str, act: Activation) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.dense(x, w, b, act)
}

fn check_stream<'a, T: Real>(t: Option<&'a Tensor<T>>, dim: usize, which: &'static str) -> Result<&'a Tensor<T>> {
    let t = t.ok_or(Error::MissingStream(which))?;
    if t.cols() != dim {
        return Err(Error::Shape(format!("{which} features have {} dims, model expects {dim}", t.cols())));
    }
    if t.rows() == 0 {
        return Err(Error::InvalidInput(format!("{which} stream has no frames")));
    }
    Ok(t)
}

/// Records the full network on `g` (which must borrow the model's store).
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &FusionConfig,
    mfcc: Option<&Tensor<T>>,
    ptm: Option<&Tensor<T>>,
) -> Result<ForwardNodes> {
    let mfcc = if cfg.mode.uses_mfcc() { Some(check_stream(mfcc, cfg.d_mfcc, "mfcc")?) } else { None };
    let ptm = if cfg.mode.uses_ptm() { Some(check_stream(ptm, cfg.d_ptm, "ptm")?) } else { None };
    if let (Some(a), Some(b)) = (mfcc, ptm) {
        if a.rows() != b.rows() {
            return Err(Error::FrameGridMismatch(format!("mfcc has {} frames, ptm {}", a.rows(), b.rows())));
        }
    }
    let project = |g: &mut Graph<T>, x: &Tensor<T>, name: &str| -> Result<NodeId> {
        let x = g.input(x.clone());
        let x = dense_p(g, x, &format!("{name}.0"), Activation::Gelu)?;
        dense_p(g, x, &format!("{name}.1"), Activation::Gelu)
    };
    let pm = mfcc.map(|x| project(g, x, "proj_mfcc")).transpose()?;
    let pp = ptm.map(|x| project(g, x, "proj_ptm")).transpose()?;

    let fused = match cfg.mode {
        FusionMode::NoneMfcc => dense_p(g, pm.expect("mfcc"), "fusion.ff", Activation::Gelu)?,
        FusionMode::NonePtm => dense_p(g, pp.expect("ptm"), "fusion.ff", Activation::Gelu)?,
        FusionMode::Concat => {
            let c = g.concat_cols(pm.expect("mfcc"), pp.expect("ptm"))?;
            dense_p(g, c, "fusion.concat", Activation::Identity)?
        }
        FusionMode::Add => g.add(pm.expect("mfcc"), pp.expect("ptm"))?,
        FusionMode::Xattn => {
            let (m, p) = (pm.expect("mfcc"), pp.expect("ptm"));
            let w = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
                .map(|n| g.param(&format!("fusion.attn.{n}")))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let w: [NodeId; 8] = w.try_into().expect("eight attention tensors");
            let attended = g.multihead_attention(m, p, p, w, cfg.n_heads)?;
            let residual = g.add(m, attended)?;
            let (gamma, beta) = (g.param("fusion.norm.gamma")?, g.param("fusion.norm.beta")?);
            g.layer_norm(residual, gamma, beta)?
        }
    };

    let mut x = fused;
    for layer in 0..cfg.lstm_layers {
        let mut outs = [x; 2];
        for (slot, (dir, tag)) in [(Direction::Forward, "fwd"), (Direction::Backward, "bwd")].into_iter().enumerate() {
            let p = format!("lstm.{layer}.{tag}");
            let (wx, wh, b) = (g.param(&format!("{p}.wx"))?, g.param(&format!("{p}.wh"))?, g.param(&format!("{p}.b"))?);
            outs[slot] = g.lstm(x, wx, wh, b, dir)?;
        }
        x = g.concat_cols(outs[0], outs[1])?;
    }
    let x = dense_p(g, x, "head.0", Activation::Gelu)?;
    let x = dense_p(g, x, "head.1", Activation::Gelu)?;
    let probs = dense_p(g, x, "head.2", Activation::Sigmoid)?;
    Ok(ForwardNodes { proj_mfcc: pm, proj_ptm: pp, fused, probs })
}

/// Probabilities for one sequence given raw tensors.
pub fn forward_tensors<T: Real>(
    params: &ParamStore<T>,
    cfg: &FusionConfig,
    mfcc: Option<&Tensor<T>>,
    ptm: Option<&Tensor<T>>,
) -> Result<Vec<T>> {
    let mut g = Graph::with_params(params);
    let nodes = forward_graph(&mut g, cfg, mfcc, ptm)?;
    Ok(g.value(nodes.probs).data().to_vec())
}

/// Mean frame BCE and its parameter gradients for one labelled sequence.
pub fn loss_and_grads<T: Real>(
    params: &ParamStore<T>,
    cfg: &FusionConfig,
    mfcc: Option<&Tensor<T>>,
    ptm: Option<&Tensor<T>>,
    labels: &[T],
) -> Result<(T, Gradients<T>)> {
    let mut g = Graph::with_params(params);
    let nodes = forward_graph(&mut g, cfg, mfcc, ptm)?;
    let loss = g.bce(nodes.probs, labels)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], grads))
}

/// Checks the streams a mode needs are present and share one frame grid.
pub fn check_streams(cfg: &FusionConfig, mfcc: Option<&FeatureMatrix>, ptm: Option<&FeatureMatrix>) -> Result<usize> {
    let need = |s: Option<&FeatureMatrix>, used: bool, name: &'static str, dim: usize| -> Result<Option<usize>> {
        if !used {
            return Ok(None);
        }
        let s = s.ok_or(Error::MissingStream(name))?;
        if s.dim() != dim {
            return Err(Error::Shape(format!("{name} features have {} dims, model expects {dim}", s.dim())));
        }
        Ok(Some(s.frames()))
    };
    let tm = need(mfcc, cfg.mode.uses_mfcc(), "mfcc", cfg.d_mfcc)?;
    let tp = need(ptm, cfg.mode.uses_ptm(), "ptm", cfg.d_ptm)?;
    if let (Some(a), Some(b)) = (mfcc.filter(|_| tm.is_some()), ptm.filter(|_| tp.is_some())) {
        if a.frames() != b.frames() || a.hop_ms() != b.hop_ms() {
            return Err(Error::FrameGridMismatch(format!(
                "mfcc {} frames @ {} ms vs ptm {} frames @ {} ms",
                a.frames(),
                a.hop_ms(),
                b.frames(),
                b.hop_ms()
            )));
        }
    }
    Ok(tm.or(tp).expect("every mode uses a stream"))
}

/// Frame scores for a whole feature sequence.
pub fn forward(
    params: &ParamStore<f32>,
    cfg: &FusionConfig,
    mfcc: Option<&FeatureMatrix>,
    ptm: Option<&FeatureMatrix>,
) -> Result<FrameScores> {
    check_streams(cfg, mfcc, ptm)?;
    let hop_ms = mfcc.filter(|_| cfg.mode.uses_mfcc()).or(ptm).map(FeatureMatrix::hop_ms).expect("checked");
    let m = mfcc.filter(|_| cfg.mode.uses_mfcc()).map(FeatureMatrix::to_tensor::<f32>);
    let p = ptm.filter(|_| cfg.mode.uses_ptm()).map(FeatureMatrix::to_tensor::<f32>);
    let probs = forward_tensors(params, cfg, m.as_ref(), p.as_ref())?;
    Ok(FrameScores { p: probs.into_iter().map(f64::from).collect(), hop_ms })
}

/// Confirms a store has exactly the tensors `cfg` calls for.
pub fn check_store<T: Real>(params: &ParamStore<T>, cfg: &FusionConfig) -> Result<()> {
    let slots = layout(cfg);
    if slots.len() != params.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} tensors, {} model needs {}",
            params.len(),
            cfg.mode,
            slots.len()
        )));
    }
    for s in slots {
        match params.get(&s.name) {
            Some(t) if t.shape() == s.shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Shape(format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)))
            }
            None => return Err(Error::InvalidConfig(format!("missing parameter {}", s.name))),
        }
    }
    Ok(())
}

/// Writes an FVCK1 checkpoint with `cfg` under the manifest key `"config"`.
pub fn write_model<W: std::io::Write>(w: W, params: &ParamStore<f32>, cfg: &FusionConfig) -> Result<()> {
    check_store(params, cfg)?;
    write_checkpoint(w, params, Some(serde_json::to_value(cfg)?))
}

pub fn save_model(path: &Path, params: &ParamStore<f32>, cfg: &FusionConfig) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, params, cfg)?;
    f.flush()?;
    Ok(())
}

pub fn read_model<R: std::io::Read>(r: R) -> Result<(ParamStore<f32>, FusionConfig)> {
    let (params, extra) = read_checkpoint(r)?;
    let cfg = extra.ok_or_else(|| Error::InvalidInput("checkpoint has no model config".into()))?;
    let cfg: FusionConfig = serde_json::from_value(cfg)?;
    cfg.validate()?;
    check_store(&params, &cfg)?;
    Ok((params, cfg))
}

pub fn load_model(path: &Path) -> Result<(ParamStore<f32>, FusionConfig)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    read_model(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Io(io) => Error::Format { path: path.to_path_buf(), msg: io.to_string() },
        Error::Format { msg, .. } => Error::Format { path: path.to_path_buf(), msg },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert_eq!("none_mfcc".parse::<FusionMode>().unwrap(), FusionMode::NoneMfcc);
        assert!("sum".parse::<FusionMode>().is_err());
    }

    #[test]
    fn fusion_block_sizes() {
        let c = |m| count_params(&FusionConfig::new(m, 13, 512)).unwrap();
        assert_eq!(c(FusionMode::Add).block("fusion"), 0);
        assert_eq!(c(FusionMode::Concat).block("fusion"), 32_896);
        assert_eq!(c(FusionMode::Xattn).block("fusion"), 66_304);
        assert_eq!(c(FusionMode::NoneMfcc).block("fusion"), 16_512);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = FusionConfig::new(FusionMode::Xattn, 13, 32);
        cfg.n_heads = 3;
        assert!(matches!(build_model::<f32>(&cfg, 0), Err(Error::InvalidConfig(_))));
        let cfg = FusionConfig::new(FusionMode::Add, 0, 32);
        assert!(count_params(&cfg).is_err());
        // the absent stream's width is irrelevant
        assert!(FusionConfig::new(FusionMode::NoneMfcc, 13, 0).validate().is_ok());
    }

    #[test]
    fn lstm_init_and_store_layout() {
        let cfg = FusionConfig { d_model: 8, lstm_hidden: 4, ..FusionConfig::new(FusionMode::Add, 3, 5) };
        let s = build_model::<f64>(&cfg, 1).unwrap();
        let b = s.get("lstm.0.fwd.b").unwrap().data();
        assert_eq!(b, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = s.get("lstm.1.bwd.wh").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        check_store(&s, &cfg).unwrap();
    }

    #[test]
    fn checkpoint_carries_config() {
        let cfg = FusionConfig { d_model: 8, lstm_hidden: 4, ..FusionConfig::new(FusionMode::Xattn, 3, 5) };
        let s = build_model::<f32>(&cfg, 1).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &s, &cfg).unwrap();
        let (back, cfg2) = read_model(bytes.as_slice()).unwrap();
        assert_eq!(cfg2, cfg);
        let mut again = Vec::new();
        write_model(&mut again, &back, &cfg2).unwrap();
        assert_eq!(again, bytes);
        let other = FusionConfig { mode: FusionMode::Add, ..cfg };
        assert!(write_model(Vec::new(), &s, &other).is_err());
    }
}
