//! Pre-norm hybrid language model built from attention, SSM and gated-MLP
//! blocks, with every matrix wrapped in a [`ReparamLayer`].

pub mod checkpoint;
mod config;

use std::collections::HashMap;

pub use config::{BlockKind, ModelConfig, ProjectorMode};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::reparam::{placement, BlockType, MultiplierInit, MultiplierSpec, ReparamLayer};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator guard for every RMSNorm in the model.
pub const RMS_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub norm: usize,
    pub x: ReparamLayer,
    pub z: ReparamLayer,
    pub b: ReparamLayer,
    pub c: ReparamLayer,
    pub dt: ReparamLayer,
    pub out: ReparamLayer,
    pub dt_bias: usize,
    /// Depthwise kernels for the concatenated `[X | B | C]` channels.
    pub conv: usize,
    pub log_a: usize,
    pub d_skip: usize,
    pub inner_norm: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum Block {
    Attn {
        norm: usize,
        q: ReparamLayer,
        k: ReparamLayer,
        v: ReparamLayer,
        out: ReparamLayer,
    },
    Mlp {
        norm: usize,
        gate: ReparamLayer,
        up: ReparamLayer,
        down: ReparamLayer,
    },
    Ssm(Box<SsmBlock>),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Self::Attn { .. } => BlockKind::Attn,
            Self::Mlp { .. } => BlockKind::Mlp,
            Self::Ssm(_) => BlockKind::Ssm,
        }
    }

    pub fn layers(&self) -> Vec<&ReparamLayer> {
        match self {
            Self::Attn { q, k, v, out, .. } => vec![q, k, v, out],
            Self::Mlp { gate, up, down, .. } => vec![gate, up, down],
            Self::Ssm(s) => vec![&s.x, &s.z, &s.b, &s.c, &s.dt, &s.out],
        }
    }
}

/// Per-forward knobs that do not change the parameters.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Multiplies the embedding output and every residual-branch output.
    pub residual_scale: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            residual_scale: 1.0,
        }
    }
}

/// Named intermediate activations captured during a forward pass.
pub type Probes = Vec<(String, Var)>;

/// Parameters placed into a graph, with effective weights built once.
pub struct Bound {
    pub vars: Vec<Var>,
    eff: HashMap<usize, Var>,
    /// Layers whose `W̄` entered the graph as a leaf, for the closed-form path.
    manual: Vec<(ReparamLayer, Var)>,
}

impl Bound {
    /// Effective weight of a layer (after any fixed forward multiplier).
    pub fn weight(&self, layer: &ReparamLayer) -> Var {
        self.eff[&layer.w]
    }

    /// One gradient per parameter, zeros for frozen ones.
    pub fn param_grads<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = self
            .vars
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect();
        for (layer, leaf) in &self.manual {
            let gbar = grads.take(*leaf).expect("manual leaf requires grad");
            let lg = layer.manual_gradients(store, &gbar)?;
            out[layer.w] = lg.w;
            for (id, g) in [(layer.scalar, lg.scalar), (layer.row, lg.row), (layer.col, lg.col)] {
                if let (Some(id), Some(g)) = (id, g) {
                    out[id] = g;
                }
            }
        }
        Ok(out)
    }
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: ReparamLayer,
    pub blocks: Vec<Block>,
    pub projector: ReparamLayer,
}

fn block_type(kind: BlockKind) -> BlockType {
    match kind {
        BlockKind::Attn => BlockType::Attention,
        BlockKind::Ssm => BlockType::Ssm,
        BlockKind::Mlp => BlockType::GatedMlp,
    }
}

fn spec_for(cfg: &ModelConfig, block: BlockType, local: &str, role: &str) -> MultiplierSpec {
    if let Some(s) = cfg.placement_overrides.get(role) {
        return *s;
    }
    if block == BlockType::Projector {
        return cfg.projector.spec();
    }
    placement(block, cfg.placement, cfg.ssm_internal_rmsnorm)
        .get(local)
        .copied()
        .unwrap_or_default()
}

impl ModelConfig {
    /// Multipliers a layer of `role` (`attn.q`, `embed`, ...) gets under
    /// this config's placement.
    pub fn role_spec(&self, role: &str) -> Result<MultiplierSpec> {
        let (block, local) = role.split_once('.').unwrap_or((role, role));
        let block: BlockType = block.parse()?;
        Ok(spec_for(self, block, local, role))
    }
}

/// The tuned value goes to the scalar if present, else the row, else the column.
fn init_for(cfg: &ModelConfig, role: &str, spec: MultiplierSpec) -> MultiplierInit {
    let mut init = MultiplierInit::default();
    if let Some(&v) = cfg.multiplier_init.get(role) {
        if spec.scalar {
            init.scalar = v;
        } else if spec.row {
            init.row = v;
        } else {
            init.col = v;
        }
    }
    init
}

/// `ln(e^y − 1)`, the softplus preimage.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::fork(seed, "model-init");
        let mut st = ParamStore::new();
        let d = cfg.width;
        let (h, hkv, dh) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim());
        let n = cfg.ssm_state_dim;
        let mat = |rows: usize, cols: usize, rng: &mut Rng| {
            Tensor::<T>::randn([rows, cols], cfg.init_scale / (cols as f64).sqrt(), rng)
        };
        let add_layer = |st: &mut ParamStore<T>,
                             prefix: &str,
                             block: BlockType,
                             local: &str,
                             role: &str,
                             w: Tensor<T>|
         -> Result<()> {
            let spec = spec_for(&cfg, block, local, role);
            ReparamLayer::create(
                st,
                prefix,
                role,
                w,
                spec,
                cfg.log_scale,
                init_for(&cfg, role, spec),
                true,
            )?;
            Ok(())
        };

        let emb = Tensor::randn([cfg.vocab, d], cfg.init_scale, &mut rng);
        add_layer(&mut st, "embed", BlockType::Embedding, "embed", "embed", emb)?;
        for (i, &kind) in cfg.blocks.iter().enumerate() {
            let kname = kind.as_str();
            let p = format!("blocks.{i}.{kname}");
            st.add(
                format!("blocks.{i}.norm.weight"),
                Tensor::ones([d]),
                ParamKind::Vector,
                "norm",
                cfg.backbone_norm_learnable,
            )?;
            let bt = block_type(kind);
            let layer = |st: &mut ParamStore<T>, local: &str, w: Tensor<T>| {
                add_layer(st, &format!("{p}.{local}"), bt, local, &format!("{kname}.{local}"), w)
            };
            match kind {
                BlockKind::Attn => {
                    layer(&mut st, "q", mat(h * dh, d, &mut rng))?;
                    layer(&mut st, "k", mat(hkv * dh, d, &mut rng))?;
                    layer(&mut st, "v", mat(hkv * dh, d, &mut rng))?;
                    layer(&mut st, "out", mat(d, h * dh, &mut rng))?;
                }
                BlockKind::Mlp => {
                    let m = cfg.mlp_expansion * d;
                    layer(&mut st, "gate", mat(m, d, &mut rng))?;
                    layer(&mut st, "up", mat(m, d, &mut rng))?;
                    layer(&mut st, "down", mat(d, m, &mut rng))?;
                }
                BlockKind::Ssm => {
                    layer(&mut st, "x", mat(d, d, &mut rng))?;
                    layer(&mut st, "z", mat(d, d, &mut rng))?;
                    layer(&mut st, "b", mat(n, d, &mut rng))?;
                    layer(&mut st, "c", mat(n, d, &mut rng))?;
                    layer(&mut st, "dt", mat(h, d, &mut rng))?;
                    layer(&mut st, "out", mat(d, d, &mut rng))?;
                    let k = cfg.ssm_conv_width;
                    let bound = 1.0 / (k as f64).sqrt();
                    let conv = (0..(d + 2 * n) * k)
                        .map(|_| T::lit(bound * (2.0 * rng.uniform() - 1.0)))
                        .collect();
                    let vector = |st: &mut ParamStore<T>, name: &str, value: Tensor<T>| {
                        st.add(
                            format!("{p}.{name}"),
                            value,
                            ParamKind::Vector,
                            format!("ssm.{name}"),
                            true,
                        )
                    };
                    vector(&mut st, "conv", Tensor::new([d + 2 * n, k], conv)?)?;
                    let dt_bias = (0..h)
                        .map(|_| {
                            let y = (1e-3f64.ln() + rng.uniform() * (1e-1f64 / 1e-3).ln()).exp();
                            T::lit(inv_softplus(y))
                        })
                        .collect();
                    vector(&mut st, "dt_bias", Tensor::vector(dt_bias))?;
                    let log_a = (0..h)
                        .map(|_| T::lit((1.0 + 15.0 * rng.uniform()).ln()))
                        .collect();
                    vector(&mut st, "log_a", Tensor::vector(log_a))?;
                    vector(&mut st, "d_skip", Tensor::ones([h]))?;
                    if cfg.ssm_internal_rmsnorm {
                        st.add(
                            format!("{p}.inner_norm.weight"),
                            Tensor::ones([d]),
                            ParamKind::Vector,
                            "ssm.inner_norm",
                            cfg.backbone_norm_learnable,
                        )?;
                    }
                }
            }
        }
        let proj = mat(cfg.vocab, d, &mut rng);
        add_layer(&mut st, "projector", BlockType::Projector, "projector", "projector", proj)?;
        Self::from_store(cfg, st)
    }

    /// Rebuilds the layer structure from parameter names. Multipliers that
    /// are absent from the store are simply absent from the model, which is
    /// how merged stores load.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let layer = |prefix: String| ReparamLayer::from_store(&store, &prefix);
        let embed = layer("embed".into())?;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, &kind) in cfg.blocks.iter().enumerate() {
            let p = format!("blocks.{i}.{}", kind.as_str());
            let norm = need(format!("blocks.{i}.norm.weight"))?;
            blocks.push(match kind {
                BlockKind::Attn => Block::Attn {
                    norm,
                    q: layer(format!("{p}.q"))?,
                    k: layer(format!("{p}.k"))?,
                    v: layer(format!("{p}.v"))?,
                    out: layer(format!("{p}.out"))?,
                },
                BlockKind::Mlp => Block::Mlp {
                    norm,
                    gate: layer(format!("{p}.gate"))?,
                    up: layer(format!("{p}.up"))?,
                    down: layer(format!("{p}.down"))?,
                },
                BlockKind::Ssm => Block::Ssm(Box::new(SsmBlock {
                    norm,
                    x: layer(format!("{p}.x"))?,
                    z: layer(format!("{p}.z"))?,
                    b: layer(format!("{p}.b"))?,
                    c: layer(format!("{p}.c"))?,
                    dt: layer(format!("{p}.dt"))?,
                    out: layer(format!("{p}.out"))?,
                    dt_bias: need(format!("{p}.dt_bias"))?,
                    conv: need(format!("{p}.conv"))?,
                    log_a: need(format!("{p}.log_a"))?,
                    d_skip: need(format!("{p}.d_skip"))?,
                    inner_norm: store.id(&format!("{p}.inner_norm.weight")),
                })),
            });
        }
        let projector = layer("projector".into())?;
        let (pv, pd) = store.value(projector.w).dims2()?;
        if pv != cfg.vocab || pd != cfg.width {
            return Err(Error::Config(format!(
                "projector is [{pv}x{pd}], config wants [{}x{}]",
                cfg.vocab, cfg.width
            )));
        }
        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            projector,
        })
    }

    pub fn layers(&self) -> Vec<&ReparamLayer> {
        let mut v = vec![&self.embed];
        for b in &self.blocks {
            v.extend(b.layers());
        }
        v.push(&self.projector);
        v
    }

    /// Binds parameters into `g` and assembles every effective weight.
    ///
    /// With `manual`, each `W̄` is computed outside the graph and enters as a
    /// leaf; [`Bound::param_grads`] then maps `∂L/∂W̄` back to the matrix and
    /// multipliers in closed form.
    pub fn bind(&self, g: &mut Graph<T>, manual: bool) -> Result<Bound> {
        let vars = self.store.bind(g);
        let mut eff = HashMap::new();
        let mut manual_leaves = Vec::new();
        for layer in self.layers() {
            let mut w = if manual {
                let leaf = g.param(layer.merged_weight(&self.store)?);
                manual_leaves.push((layer.clone(), leaf));
                leaf
            } else {
                layer.effective_weight(g, &vars, &self.store)?
            };
            if let Some(&c) = self.cfg.forward_multipliers.get(&layer.role) {
                w = g.scale(w, T::lit(c))?;
            }
            eff.insert(layer.w, w);
        }
        Ok(Bound {
            vars,
            eff,
            manual: manual_leaves,
        })
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, x: Var, weight: usize) -> Result<Var> {
        let xn = g.rmsnorm(x, T::lit(RMS_EPS))?;
        g.mul(xn, b.vars[weight])
    }

    /// Logits `[T×V]` for one token sequence.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tokens: &[usize],
        opts: &ForwardOptions,
        probes: Option<&mut Probes>,
    ) -> Result<Var> {
        let mut scratch = Probes::new();
        let probes = probes.unwrap_or(&mut scratch);
        let rs = T::lit(opts.residual_scale);
        let table = b.weight(&self.embed);
        let mut x = g.gather_rows(table, tokens)?;
        if opts.residual_scale != 1.0 {
            x = g.scale(x, rs)?;
        }
        probes.push(("embed.out".into(), x));
        for (i, block) in self.blocks.iter().enumerate() {
            let norm = match block {
                Block::Attn { norm, .. } | Block::Mlp { norm, .. } => *norm,
                Block::Ssm(s) => s.norm,
            };
            let xn = self.norm(g, b, x, norm)?;
            probes.push((format!("blocks.{i}.in"), xn));
            let mut y = self.block_forward(g, b, i, xn, probes)?;
            if opts.residual_scale != 1.0 {
                y = g.scale(y, rs)?;
            }
            probes.push((format!("blocks.{i}.{}.out", block.kind().as_str()), y));
            x = g.add(x, y)?;
            probes.push((format!("blocks.{i}.resid"), x));
        }
        let xf = g.rmsnorm(x, T::lit(RMS_EPS))?;
        let logits = g.matmul_bt(xf, b.weight(&self.projector))?;
        probes.push(("logits".into(), logits));
        Ok(logits)
    }

    /// Residual-branch output of block `i` for an already normalized input.
    pub fn block_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        i: usize,
        xn: Var,
        probes: &mut Probes,
    ) -> Result<Var> {
        match &self.blocks[i] {
            Block::Attn { q, k, v, out, .. } => self.attention(g, b, xn, [q, k, v, out], i, probes),
            Block::Mlp { gate, up, down, .. } => {
                let gt = g.matmul_bt(xn, b.weight(gate))?;
                probes.push((format!("blocks.{i}.mlp.gate_pre"), gt));
                let gs = g.silu(gt)?;
                let u = g.matmul_bt(xn, b.weight(up))?;
                let hdn = g.mul(gs, u)?;
                g.matmul_bt(hdn, b.weight(down))
            }
            Block::Ssm(s) => self.ssm(g, b, xn, s, i, probes),
        }
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        [q, k, v, out]: [&ReparamLayer; 4],
        i: usize,
        probes: &mut Probes,
    ) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let group = self.cfg.n_heads / self.cfg.n_kv_heads;
        let qa = g.matmul_bt(x, b.weight(q))?;
        let ka = g.matmul_bt(x, b.weight(k))?;
        let va = g.matmul_bt(x, b.weight(v))?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let kv = h / group;
            let qh = g.slice_cols(qa, h * dh, dh)?;
            let kh = g.slice_cols(ka, kv * dh, dh)?;
            let vh = g.slice_cols(va, kv * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            probes.push((format!("blocks.{i}.attn.qk"), scores));
            let p = g.softmax_rows(scores, true)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        g.matmul_bt(cat, b.weight(out))
    }

    fn ssm(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        s: &SsmBlock,
        i: usize,
        probes: &mut Probes,
    ) -> Result<Var> {
        let d = self.cfg.width;
        let n = self.cfg.ssm_state_dim;
        let xp = g.matmul_bt(x, b.weight(&s.x))?;
        let bp = g.matmul_bt(x, b.weight(&s.b))?;
        let cp = g.matmul_bt(x, b.weight(&s.c))?;
        let cat = g.concat_cols(&[xp, bp, cp])?;
        let conv = g.conv1d_causal(cat, b.vars[s.conv])?;
        let act = g.silu(conv)?;
        let xs = g.slice_cols(act, 0, d)?;
        let bs = g.slice_cols(act, d, n)?;
        let cs = g.slice_cols(act, d + n, n)?;
        let zp = g.matmul_bt(x, b.weight(&s.z))?;
        let z = g.silu(zp)?;
        let dtp = g.matmul_bt(x, b.weight(&s.dt))?;
        let dtp = g.add(dtp, b.vars[s.dt_bias])?;
        let dt = g.softplus(dtp)?;
        probes.push((format!("blocks.{i}.ssm.dt"), dt));
        let y = g.ssm_scan(
            xs,
            bs,
            cs,
            dt,
            b.vars[s.log_a],
            b.vars[s.d_skip],
            self.cfg.n_heads,
        )?;
        let mut f = g.mul(y, z)?;
        if let Some(w) = s.inner_norm {
            f = self.norm(g, b, f, w)?;
        }
        g.matmul_bt(f, b.weight(&s.out))
    }

    /// Mean next-token loss over a batch of `seq_len + 1` token windows.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &[Vec<usize>],
        z_coeff: f64,
        opts: &ForwardOptions,
        mut probes: Option<&mut Probes>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for seq in batch {
            if seq.len() < 2 {
                return Err(Error::Config("sequence needs at least two tokens".into()));
            }
            let (inp, tgt) = (&seq[..seq.len() - 1], &seq[1..]);
            let logits = self.forward(g, b, inp, opts, probes.as_deref_mut())?;
            let l = g.cross_entropy_with_zloss(logits, tgt, T::lit(z_coeff))?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        g.scale(total.expect("non-empty"), T::lit(1.0 / batch.len() as f64))
    }

    /// Logits without gradient bookkeeping.
    pub fn logits(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let l = self.forward(&mut g, &b, tokens, opts, None)?;
        Ok(g.value(l).clone())
    }

    /// Batch loss without gradients.
    pub fn loss_value(&self, batch: &[Vec<usize>], z_coeff: f64) -> Result<T> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let loss = self.batch_loss(&mut g, &b, batch, z_coeff, &ForwardOptions::default(), None)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss and per-parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &[Vec<usize>],
        z_coeff: f64,
        manual: bool,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, manual)?;
        let loss = self.batch_loss(&mut g, &b, batch, z_coeff, &ForwardOptions::default(), None)?;
        let lv = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        Ok((lv, b.param_grads(&self.store, &mut grads)?))
    }
}
