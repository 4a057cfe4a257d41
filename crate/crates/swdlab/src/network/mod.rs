//! The denoiser shared by teacher, student, and fake model: a small patch
//! transformer with adaLN-style conditioning, a designated middle-block
//! feature tap, and positional encoding that works across resolutions.

mod pos;

pub use pos::pos_encoding;

use crate::tensor::{self, Rng, Tensor, TensorError};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    Fake,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Fake => "fake",
        }
    }

    fn parse(s: &str) -> Option<Role> {
        match s {
            "teacher" => Some(Role::Teacher),
            "student" => Some(Role::Student),
            "fake" => Some(Role::Fake),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Spatial patch edge.
    pub patch: usize,
    /// Temporal patch: 1 for image models, 2 for video models.
    pub temporal_patch: usize,
    /// Hidden width C.
    pub width: usize,
    /// Transformer depth; even, so the middle block is well defined.
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Grid caps in patches: (t, h, w).
    pub max_grid: (usize, usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch: 4,
            temporal_patch: 1,
            width: 128,
            depth: 6,
            heads: 4,
            num_classes: 2,
            max_grid: (16, 32, 32),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| TensorError::InvalidShape {
            op: "net_config",
            shape: vec![self.width, self.depth, self.heads],
            reason,
        };
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(bad(format!("depth {} must be even and positive", self.depth)));
        }
        if self.width % self.heads != 0 {
            return Err(bad(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.width % 8 != 0 {
            return Err(bad(format!("width {} must be a multiple of 8", self.width)));
        }
        if !(self.temporal_patch == 1 || self.temporal_patch == 2) {
            return Err(bad(format!("temporal patch {} not in {{1, 2}}", self.temporal_patch)));
        }
        if self.patch == 0 {
            return Err(bad("patch must be positive".into()));
        }
        Ok(())
    }

    /// Flattened values per token.
    pub fn patch_dim(&self) -> usize {
        self.temporal_patch * self.patch * self.patch
    }

    /// Token count for a sample resolution `(t, h, w)`.
    pub fn tokens_for(&self, t: usize, h: usize, w: usize) -> usize {
        (t / self.temporal_patch) * (h / self.patch) * (w / self.patch)
    }
}

/// Middle-block token activations, shape `[N, L, C]`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub tokens: Tensor,
}

impl FeatureMap {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Per-image mean over tokens: `[N, C]`.
    pub fn token_means(&self) -> Result<Tensor> {
        self.tokens.mean_axes(&[1], false)
    }
}

pub struct DenoiserNet {
    pub config: NetConfig,
    pub role: Role,
    weights: BTreeMap<String, Tensor>,
}

impl std::fmt::Debug for DenoiserNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DenoiserNet({:?}, {} params, {:?})",
            self.role,
            self.param_count(),
            self.config
        )
    }
}

impl Clone for DenoiserNet {
    fn clone(&self) -> Self {
        DenoiserNet {
            config: self.config.clone(),
            role: self.role,
            weights: self.weights.clone(),
        }
    }
}

fn trunc_normal(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            loop {
                let z = rng.normal();
                if z.abs() <= 2.0 {
                    return z * sigma;
                }
            }
        })
        .collect()
}

impl DenoiserNet {
    /// Truncated-normal init (sigma 0.02) with zero-initialized modulation
    /// and output head, so a fresh net predicts zero velocity.
    pub fn init(config: NetConfig, role: Role, rng: &mut Rng) -> Result<DenoiserNet> {
        config.validate()?;
        let c = config.width;
        let p = config.patch_dim();
        let mut w: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut dense = |name: &str, rows: usize, cols: usize, rng: &mut Rng| {
            let t = Tensor::from_vec(trunc_normal(rng, rows * cols, 0.02), &[rows, cols])
                .expect("init")
                .requiring_grad();
            w.insert(name.to_string(), t);
        };
        dense("patch_embed.w", p, c, rng);
        dense("time_embed.w1", c, c, rng);
        dense("time_embed.w2", c, c, rng);
        dense("class_embed", config.num_classes + 1, c, rng);
        for b in 0..config.depth {
            dense(&format!("block{b}.qkv.w"), c, 3 * c, rng);
            dense(&format!("block{b}.proj.w"), c, c, rng);
            dense(&format!("block{b}.mlp.w1"), c, 4 * c, rng);
            dense(&format!("block{b}.mlp.w2"), 4 * c, c, rng);
            // modulation weights start small but nonzero; the zero head
            // already guarantees zero output, and a dead-zero modulation
            // path would leave the tau-dependent gain without a gradient
            dense(&format!("block{b}.ada.w"), c, 6 * c, rng);
        }
        dense("final.ada.w", c, 2 * c, rng);
        let mut zeros = |name: &str, shape: &[usize]| {
            w.insert(name.to_string(), Tensor::zeros(shape).requiring_grad());
        };
        zeros("patch_embed.b", &[c]);
        zeros("time_embed.b1", &[c]);
        zeros("time_embed.b2", &[c]);
        for b in 0..config.depth {
            zeros(&format!("block{b}.qkv.b"), &[3 * c]);
            zeros(&format!("block{b}.proj.b"), &[c]);
            zeros(&format!("block{b}.mlp.b1"), &[4 * c]);
            zeros(&format!("block{b}.mlp.b2"), &[c]);
            zeros(&format!("block{b}.ada.b"), &[6 * c]);
        }
        zeros("final.ada.b", &[2 * c]);
        zeros("head.w", &[c, p]);
        zeros("head.b", &[p]);
        Ok(DenoiserNet {
            config,
            role,
            weights: w,
        })
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.weights.values() {
            t.zero_grad();
        }
    }

    /// Rebuilds every weight leaf with or without gradient accumulation.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.weights.values_mut() {
            let d = t.detach();
            *t = if trainable { d.requiring_grad() } else { d };
        }
    }

    pub fn with_role(mut self, role: Role) -> DenoiserNet {
        self.role = role;
        self
    }

    fn weight(&self, name: &str) -> &Tensor {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("missing weight {name}"))
    }

    /// Input geometry: `(t, h, w)` of one sample, validated against patching.
    fn sample_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let cfg = &self.config;
        let bad = |reason: String| TensorError::InvalidShape {
            op: "forward",
            shape: shape.to_vec(),
            reason,
        };
        let (t, h, w) = match shape.len() {
            3 => (1usize, shape[1], shape[2]),
            4 => (shape[1], shape[2], shape[3]),
            _ => return Err(bad("expects [N,H,W] or [N,T,H,W]".into())),
        };
        if shape.len() == 3 && cfg.temporal_patch != 1 {
            return Err(bad("video model needs [N,T,H,W] input".into()));
        }
        if t % cfg.temporal_patch != 0 {
            return Err(bad(format!("T={t} not divisible by temporal patch {}", cfg.temporal_patch)));
        }
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(bad(format!("H,W=({h},{w}) not divisible by patch {}", cfg.patch)));
        }
        Ok((t, h, w))
    }

    fn patchify(&self, x: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let n = x.shape()[0];
        let (tp, p) = (cfg.temporal_patch, cfg.patch);
        let (gt, gh, gw) = (t / tp, h / p, w / p);
        x.reshape(&[n, gt, tp, gh, p, gw, p])?
            .permute(&[0, 1, 3, 5, 2, 4, 6])?
            .reshape(&[n, gt * gh * gw, tp * p * p])
    }

    fn unpatchify(&self, tokens: &Tensor, t: usize, h: usize, w: usize, out_shape: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        let n = tokens.shape()[0];
        let (tp, p) = (cfg.temporal_patch, cfg.patch);
        let (gt, gh, gw) = (t / tp, h / p, w / p);
        tokens
            .reshape(&[n, gt, gh, gw, tp, p, p])?
            .permute(&[0, 1, 4, 2, 5, 3, 6])?
            .reshape(out_shape)
    }

    /// Sinusoidal embedding of per-sample timesteps, `[N, C]`.
    fn tau_embedding(&self, taus: &[f64]) -> Result<Tensor> {
        let c = self.config.width;
        let half = c / 2;
        let mut data = vec![0.0; taus.len() * c];
        for (i, &tau) in taus.iter().enumerate() {
            let t = tau * 1000.0;
            for j in 0..half {
                let freq = (-(j as f64) * (10000f64).ln() / half as f64).exp();
                let arg = t * freq;
                data[i * c + 2 * j] = arg.sin();
                data[i * c + 2 * j + 1] = arg.cos();
            }
        }
        Tensor::from_vec(data, &[taus.len(), c])
    }

    /// Denoiser forward pass.
    ///
    /// `taus` and `class_ids` are per-sample; `None` selects the learned
    /// unconditional embedding. Output has the input's shape. When
    /// `want_features` is set, the middle block's token activations come
    /// back as well; the tap never changes the velocity output.
    pub fn forward(
        &self,
        x_t: &Tensor,
        taus: &[f64],
        class_ids: &[Option<usize>],
        want_features: bool,
    ) -> Result<(Tensor, Option<FeatureMap>)> {
        let cfg = &self.config;
        let n = x_t.shape()[0];
        if taus.len() != n || class_ids.len() != n {
            return Err(TensorError::InvalidShape {
                op: "forward",
                shape: x_t.shape().to_vec(),
                reason: format!("batch {n} but {} taus, {} class ids", taus.len(), class_ids.len()),
            });
        }
        for &tau in taus {
            if !(0.0..=1.0).contains(&tau) {
                return Err(TensorError::InvalidShape {
                    op: "forward",
                    shape: x_t.shape().to_vec(),
                    reason: format!("tau {tau} outside [0,1]"),
                });
            }
        }
        let (t, h, w) = self.sample_dims(x_t.shape())?;
        let grid = (t / cfg.temporal_patch, h / cfg.patch, w / cfg.patch);
        let c = cfg.width;

        for cid in class_ids.iter().flatten() {
            if *cid >= cfg.num_classes {
                return Err(TensorError::InvalidShape {
                    op: "forward",
                    shape: x_t.shape().to_vec(),
                    reason: format!("class id {cid} out of range {}", cfg.num_classes),
                });
            }
        }
        // conditioning: MLP(sin-embed(tau)) + class embedding, null class
        // mapping to the learned unconditional row
        let ids: Vec<usize> = class_ids
            .iter()
            .map(|cid| cid.unwrap_or(cfg.num_classes))
            .collect();
        let temb = self
            .tau_embedding(taus)?
            .linear(self.weight("time_embed.w1"), Some(self.weight("time_embed.b1")))?
            .gelu()?
            .linear(self.weight("time_embed.w2"), Some(self.weight("time_embed.b2")))?;
        let cemb = self.weight("class_embed").index_rows(&ids)?;
        let cond = temb.add(&cemb)?; // [N, C]

        let pos = pos_encoding(grid, c, cfg.max_grid)?;
        let mut tokens = self
            .patchify(x_t, t, h, w)?
            .linear(self.weight("patch_embed.w"), Some(self.weight("patch_embed.b")))?
            .add(&pos)?
            .add(&cond.reshape(&[n, 1, c])?)?;

        let mut features: Option<FeatureMap> = None;
        for b in 0..cfg.depth {
            tokens = self.block(b, &tokens, &cond, n, grid.0 * grid.1 * grid.2)?;
            if want_features && b + 1 == cfg.depth / 2 {
                features = Some(FeatureMap {
                    tokens: tokens.clone(),
                });
            }
        }

        // final layer: conditioning-modulated norm, then the linear head
        let fada = cond
            .linear(self.weight("final.ada.w"), Some(self.weight("final.ada.b")))?
            .reshape(&[n, 1, 2 * c])?;
        let shift = fada.slice_axis(2, 0, c)?;
        let scale = fada.slice_axis(2, c, c)?;
        let out_tokens = tokens
            .layer_norm_last()?
            .mul(&scale.add_scalar(1.0)?)?
            .add(&shift)?
            .linear(self.weight("head.w"), Some(self.weight("head.b")))?;
        let v = self.unpatchify(&out_tokens, t, h, w, x_t.shape())?;
        Ok((v, features))
    }

    fn block(&self, b: usize, tokens: &Tensor, cond: &Tensor, n: usize, l: usize) -> Result<Tensor> {
        let c = self.config.width;
        let heads = self.config.heads;
        let dh = c / heads;
        let key = |s: &str| format!("block{b}.{s}");

        // 6C modulation: shift/scale/gate for attention, then for the MLP
        let ada = cond
            .linear(self.weight(&key("ada.w")), Some(self.weight(&key("ada.b"))))?
            .reshape(&[n, 1, 6 * c])?;
        let part = |i: usize| ada.slice_axis(2, i * c, c);
        let (shift_a, scale_a, gate_a) = (part(0)?, part(1)?, part(2)?);
        let (shift_m, scale_m, gate_m) = (part(3)?, part(4)?, part(5)?);

        let modulate = |x: &Tensor, shift: &Tensor, scale: &Tensor| -> Result<Tensor> {
            x.mul(&scale.add_scalar(1.0)?)?.add(shift)
        };

        // attention
        let normed = modulate(&tokens.layer_norm_last()?, &shift_a, &scale_a)?;
        let qkv = normed.linear(self.weight(&key("qkv.w")), Some(self.weight(&key("qkv.b"))))?;
        let q = qkv.slice_axis(2, 0, c)?;
        let k = qkv.slice_axis(2, c, c)?;
        let v = qkv.slice_axis(2, 2 * c, c)?;
        let to_heads = |x: &Tensor| -> Result<Tensor> {
            x.reshape(&[n, l, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n * heads, l, dh])
        };
        let qh = to_heads(&q)?;
        let kh = to_heads(&k)?;
        let vh = to_heads(&v)?;
        let kt = kh.reshape(&[n, heads, l, dh])?.permute(&[0, 1, 3, 2])?.reshape(&[n * heads, dh, l])?;
        let attn = qh
            .bmm(&kt)?
            .scale(1.0 / (dh as f64).sqrt())?
            .softmax_last()?
            .bmm(&vh)?
            .reshape(&[n, heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, c])?
            .linear(self.weight(&key("proj.w")), Some(self.weight(&key("proj.b"))))?;
        let tokens = tokens.add(&gate_a.mul(&attn)?)?;

        // MLP
        let normed = modulate(&tokens.layer_norm_last()?, &shift_m, &scale_m)?;
        let mlp = normed
            .linear(self.weight(&key("mlp.w1")), Some(self.weight(&key("mlp.b1"))))?
            .gelu()?
            .linear(self.weight(&key("mlp.w2")), Some(self.weight(&key("mlp.b2"))))?;
        tokens.add(&gate_m.mul(&mlp)?)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    /// Writes a directory of SWT1 tensors plus a plain-text manifest.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))?;
        let mut manifest = String::new();
        let cfg = &self.config;
        writeln!(manifest, "swdlab-checkpoint v1").unwrap();
        writeln!(manifest, "role={}", self.role.as_str()).unwrap();
        writeln!(manifest, "patch={}", cfg.patch).unwrap();
        writeln!(manifest, "temporal_patch={}", cfg.temporal_patch).unwrap();
        writeln!(manifest, "width={}", cfg.width).unwrap();
        writeln!(manifest, "depth={}", cfg.depth).unwrap();
        writeln!(manifest, "heads={}", cfg.heads).unwrap();
        writeln!(manifest, "num_classes={}", cfg.num_classes).unwrap();
        writeln!(
            manifest,
            "max_grid={},{},{}",
            cfg.max_grid.0, cfg.max_grid.1, cfg.max_grid.2
        )
        .unwrap();
        for (name, t) in &self.weights {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "tensor {name} {} f64", dims.join("x")).unwrap();
            tensor::save_swt1(dir.join(format!("{name}.swt1")), t)?;
        }
        std::fs::write(dir.join("manifest.txt"), manifest)
            .map_err(|e| TensorError::Io(format!("{}: {e}", dir.display())))
    }

    /// Loads a checkpoint directory; every tensor is validated against the
    /// manifest and the reconstructed config.
    pub fn load<P: AsRef<Path>>(dir: P) -> Result<DenoiserNet> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| TensorError::Io(format!("{}: {e}", manifest_path.display())))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "swdlab-checkpoint v1" {
            return Err(TensorError::Io(format!(
                "{}: unrecognized header {header:?}",
                manifest_path.display()
            )));
        }
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().unwrap_or_default().to_string();
                let dims: Vec<usize> = parts
                    .next()
                    .unwrap_or_default()
                    .split('x')
                    .filter_map(|d| d.parse().ok())
                    .collect();
                tensors.push((name, dims));
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| TensorError::Io(format!("manifest missing key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| TensorError::Io(format!("manifest key {k} not an integer")))
        };
        let grid_parts: Vec<usize> = get("max_grid")?
            .split(',')
            .filter_map(|d| d.parse().ok())
            .collect();
        if grid_parts.len() != 3 {
            return Err(TensorError::Io("manifest max_grid malformed".into()));
        }
        let config = NetConfig {
            patch: parse_usize("patch")?,
            temporal_patch: parse_usize("temporal_patch")?,
            width: parse_usize("width")?,
            depth: parse_usize("depth")?,
            heads: parse_usize("heads")?,
            num_classes: parse_usize("num_classes")?,
            max_grid: (grid_parts[0], grid_parts[1], grid_parts[2]),
        };
        config.validate()?;
        let role = Role::parse(&get("role")?)
            .ok_or_else(|| TensorError::Io("manifest role unrecognized".into()))?;

        let mut weights = BTreeMap::new();
        for (name, dims) in tensors {
            let t = tensor::load_swt1(dir.join(format!("{name}.swt1")))
                .map_err(|e| TensorError::Io(format!("tensor {name}: {e}")))?;
            if t.shape() != dims.as_slice() {
                return Err(TensorError::Io(format!(
                    "tensor {name}: file shape {:?} does not match manifest {dims:?}",
                    t.shape()
                )));
            }
            weights.insert(name, t.requiring_grad());
        }
        let net = DenoiserNet {
            config,
            role,
            weights,
        };
        net.check_weight_shapes()?;
        Ok(net)
    }

    /// Cross-checks loaded weight shapes against what the config implies.
    fn check_weight_shapes(&self) -> Result<()> {
        let c = self.config.width;
        let p = self.config.patch_dim();
        let expect: Vec<(String, Vec<usize>)> = {
            let mut v = vec![
                ("patch_embed.w".to_string(), vec![p, c]),
                ("patch_embed.b".to_string(), vec![c]),
                ("time_embed.w1".to_string(), vec![c, c]),
                ("time_embed.b1".to_string(), vec![c]),
                ("time_embed.w2".to_string(), vec![c, c]),
                ("time_embed.b2".to_string(), vec![c]),
                ("class_embed".to_string(), vec![self.config.num_classes + 1, c]),
                ("final.ada.w".to_string(), vec![c, 2 * c]),
                ("final.ada.b".to_string(), vec![2 * c]),
                ("head.w".to_string(), vec![c, p]),
                ("head.b".to_string(), vec![p]),
            ];
            for b in 0..self.config.depth {
                v.push((format!("block{b}.qkv.w"), vec![c, 3 * c]));
                v.push((format!("block{b}.qkv.b"), vec![3 * c]));
                v.push((format!("block{b}.proj.w"), vec![c, c]));
                v.push((format!("block{b}.proj.b"), vec![c]));
                v.push((format!("block{b}.mlp.w1"), vec![c, 4 * c]));
                v.push((format!("block{b}.mlp.b1"), vec![4 * c]));
                v.push((format!("block{b}.mlp.w2"), vec![4 * c, c]));
                v.push((format!("block{b}.mlp.b2"), vec![c]));
                v.push((format!("block{b}.ada.w"), vec![c, 6 * c]));
                v.push((format!("block{b}.ada.b"), vec![6 * c]));
            }
            v
        };
        for (name, shape) in expect {
            match self.weights.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(TensorError::Io(format!(
                        "tensor {name}: shape {:?} inconsistent with config (wants {shape:?})",
                        t.shape()
                    )))
                }
                None => return Err(TensorError::Io(format!("tensor {name}: missing from checkpoint"))),
            }
        }
        Ok(())
    }
}
