//! Model assembly and forward pass.

use super::{MxtConfig, GRID_CELLS, IMAGE_SIDE};
use crate::dataset::{normalize_image, normalize_vec, Frame, NormStats, ObsValue};
use crate::embodiment::{ActModality, EmbodimentSpec, ObsModality};
use crate::nn::{
    self, add, add_rowvec, attention, concat_token_groups, dropout, gelu, layernorm, matmul,
    repeat_rows, slice_token_range, transpose_per_sample, ParamGroup, ParamStore, Scalar, Tensor,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// A batch of normalized observations from one embodiment.
pub struct ObsBatch<F: Scalar> {
    pub batch: usize,
    /// (B*3, 32*32) per image modality.
    pub images: BTreeMap<ObsModality, Array2<F>>,
    /// (B, dim) per vector modality.
    pub vectors: BTreeMap<ObsModality, Array2<F>>,
}

impl<F: Scalar> ObsBatch<F> {
    pub fn from_frames(frames: &[&Frame], stats: &NormStats) -> Self {
        assert!(!frames.is_empty());
        let b = frames.len();
        let mut images = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for (m, v0) in &frames[0].obs {
            match v0 {
                ObsValue::Image(img0) => {
                    assert_eq!((img0.h, img0.w), (IMAGE_SIDE, IMAGE_SIDE));
                    let mut arr = Array2::from_elem((b * img0.c, img0.h * img0.w), F::ZERO);
                    for (i, f) in frames.iter().enumerate() {
                        let ObsValue::Image(img) = &f.obs[m] else {
                            panic!("modality kind changed across frames")
                        };
                        let norm = normalize_image(img, stats);
                        for c in 0..img.c {
                            for p in 0..img.h * img.w {
                                arr[[i * img.c + c, p]] =
                                    F::from_f64(norm[c * img.h * img.w + p] as f64);
                            }
                        }
                    }
                    images.insert(*m, arr);
                }
                ObsValue::Vector(vec0) => {
                    let dim = vec0.len();
                    let mut arr = Array2::from_elem((b, dim), F::ZERO);
                    for (i, f) in frames.iter().enumerate() {
                        let ObsValue::Vector(v) = &f.obs[m] else {
                            panic!("modality kind changed across frames")
                        };
                        let norm = normalize_vec(v, &stats.obs[m]);
                        for (d, x) in norm.iter().enumerate() {
                            arr[[i, d]] = F::from_f64(*x);
                        }
                    }
                    vectors.insert(*m, arr);
                }
            }
        }
        ObsBatch {
            batch: b,
            images,
            vectors,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MxtModel<F: Scalar> {
    pub config: MxtConfig,
    pub spec: EmbodimentSpec,
    pub store: ParamStore<F>,
    /// Name prefix for embodiment-specific parameters; empty for a
    /// single-embodiment store, one prefix per embodiment in a shared store
    /// used for joint pretraining. Trunk names are never prefixed.
    pub prefix: String,
}

fn add_linear<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    din: usize,
    dout: usize,
    group: ParamGroup,
) {
    st.add(
        &format!("{prefix}.w"),
        group,
        nn::init_trunc_normal(rng, din, dout, INIT_STD),
    );
    st.add(&format!("{prefix}.b"), group, nn::init_zeros(1, dout));
}

fn add_ln<F: Scalar>(st: &mut ParamStore<F>, prefix: &str, d: usize, group: ParamGroup) {
    st.add(&format!("{prefix}.g"), group, nn::init_ones(1, d));
    st.add(&format!("{prefix}.b"), group, nn::init_zeros(1, d));
}

fn add_attn<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    qdim: usize,
    kvdim: usize,
    attn_dim: usize,
    outdim: usize,
    group: ParamGroup,
) {
    add_linear(st, rng, &format!("{prefix}.q"), qdim, attn_dim, group);
    add_linear(st, rng, &format!("{prefix}.k"), kvdim, attn_dim, group);
    add_linear(st, rng, &format!("{prefix}.v"), kvdim, attn_dim, group);
    add_linear(st, rng, &format!("{prefix}.o"), attn_dim, outdim, group);
}

fn conv_out_channels(cfg: &MxtConfig) -> usize {
    cfg.hidden
}

fn add_image_encoder<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    cfg: &MxtConfig,
    ep: &str,
    name: &str,
) {
    let [c1, c2] = cfg.conv_channels;
    let c3 = conv_out_channels(cfg);
    add_linear(st, rng, &format!("{ep}img.{name}.conv1"), 3 * 9, c1, ParamGroup::EmbodimentSpecific);
    add_linear(st, rng, &format!("{ep}img.{name}.conv2"), c1 * 9, c2, ParamGroup::EmbodimentSpecific);
    add_linear(st, rng, &format!("{ep}img.{name}.conv3"), c2 * 9, c3, ParamGroup::EmbodimentSpecific);
    st.add(
        &format!("{ep}img.{name}.cellpos"),
        ParamGroup::EmbodimentSpecific,
        nn::init_trunc_normal(rng, GRID_CELLS, cfg.hidden, INIT_STD),
    );
}

/// Conv weights are stored as (Cout, Cin*9) matrices but created via
/// add_linear, which lays them out (din, dout); transpose at use time.
fn conv_weight<F: Scalar>(ctx: &mut Ctx<F>, prefix: &str) -> (Tensor<F>, Tensor<F>) {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    (w, b)
}

#[allow(clippy::too_many_arguments)]
fn add_tokenizer<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    cfg: &MxtConfig,
    ep: &str,
    name: &str,
    tokens: usize,
    feat_dim: usize,
    mlp_in: Option<usize>,
) {
    let attn_dim = cfg.tokenizer_heads * cfg.tokenizer_head_dim;
    if let Some(din) = mlp_in {
        let mut d = din;
        for (i, &w) in cfg.tokenizer_mlp.iter().enumerate() {
            add_linear(st, rng, &format!("{ep}tok.{name}.mlp{i}"), d, w, ParamGroup::EmbodimentSpecific);
            d = w;
        }
    }
    st.add(
        &format!("{ep}tok.{name}.queries"),
        ParamGroup::EmbodimentSpecific,
        nn::init_trunc_normal(rng, tokens, cfg.hidden, INIT_STD),
    );
    add_attn(
        st,
        rng,
        &format!("{ep}tok.{name}.attn"),
        cfg.hidden,
        feat_dim,
        attn_dim,
        cfg.hidden,
        ParamGroup::EmbodimentSpecific,
    );
    add_ln(st, &format!("{ep}tok.{name}.ln"), cfg.hidden, ParamGroup::EmbodimentSpecific);
}

fn add_detokenizer<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    cfg: &MxtConfig,
    ep: &str,
    name: &str,
    out_dim: usize,
) {
    let attn_dim = cfg.detok_heads * cfg.detok_head_dim;
    st.add(
        &format!("{ep}detok.{name}.trunk_queries"),
        ParamGroup::EmbodimentSpecific,
        nn::init_trunc_normal(rng, cfg.detok_tokens, cfg.hidden, INIT_STD),
    );
    st.add(
        &format!("{ep}detok.{name}.step_queries"),
        ParamGroup::EmbodimentSpecific,
        nn::init_trunc_normal(rng, cfg.chunk, cfg.hidden, INIT_STD),
    );
    add_attn(
        st,
        rng,
        &format!("{ep}detok.{name}.attn"),
        cfg.hidden,
        cfg.hidden,
        attn_dim,
        cfg.hidden,
        ParamGroup::EmbodimentSpecific,
    );
    add_ln(st, &format!("{ep}detok.{name}.ln"), cfg.hidden, ParamGroup::EmbodimentSpecific);
    add_linear(st, rng, &format!("{ep}detok.{name}.out"), cfg.hidden, out_dim, ParamGroup::EmbodimentSpecific);
}

fn add_trunk<F: Scalar>(st: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &MxtConfig) {
    let h = cfg.hidden;
    for l in 0..cfg.encoder_layers {
        let p = format!("trunk.enc{l}");
        add_ln(st, &format!("{p}.ln1"), h, ParamGroup::Trunk);
        add_attn(st, rng, &format!("{p}.attn"), h, h, h, h, ParamGroup::Trunk);
        add_ln(st, &format!("{p}.ln2"), h, ParamGroup::Trunk);
        add_linear(st, rng, &format!("{p}.ff1"), h, cfg.feedforward, ParamGroup::Trunk);
        add_linear(st, rng, &format!("{p}.ff2"), cfg.feedforward, h, ParamGroup::Trunk);
    }
    add_ln(st, "trunk.mem_ln", h, ParamGroup::Trunk);
    for l in 0..cfg.decoder_layers {
        let p = format!("trunk.dec{l}");
        add_ln(st, &format!("{p}.ln1"), h, ParamGroup::Trunk);
        add_attn(st, rng, &format!("{p}.self"), h, h, h, h, ParamGroup::Trunk);
        add_ln(st, &format!("{p}.ln_q"), h, ParamGroup::Trunk);
        add_attn(st, rng, &format!("{p}.cross"), h, h, h, h, ParamGroup::Trunk);
        add_ln(st, &format!("{p}.ln2"), h, ParamGroup::Trunk);
        add_linear(st, rng, &format!("{p}.ff1"), h, cfg.feedforward, ParamGroup::Trunk);
        add_linear(st, rng, &format!("{p}.ff2"), cfg.feedforward, h, ParamGroup::Trunk);
    }
    add_ln(st, "trunk.out_ln", h, ParamGroup::Trunk);
}

impl<F: Scalar> MxtModel<F> {
    /// Fresh model for an embodiment; the trunk is seeded first so models of
    /// different embodiments built from the same seed share a trunk init.
    pub fn build(config: MxtConfig, spec: &EmbodimentSpec, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        add_trunk(&mut st, &mut rng, &config);
        add_embodiment_params(&mut st, &mut rng, &config, spec, "");
        MxtModel {
            config,
            spec: spec.clone(),
            store: st,
            prefix: String::new(),
        }
    }

    /// One store with a shared trunk and a prefixed embodiment-specific
    /// parameter set per spec, for joint multi-embodiment pretraining. Take
    /// the store in and out of per-embodiment views with `std::mem::swap`.
    pub fn build_shared(
        config: MxtConfig,
        specs: &[EmbodimentSpec],
        seed: u64,
    ) -> (ParamStore<F>, Vec<String>) {
        config.validate().expect("invalid model config");
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        add_trunk(&mut st, &mut rng, &config);
        let mut prefixes = Vec::new();
        for spec in specs {
            let ep = format!("{}::", spec.name);
            add_embodiment_params(&mut st, &mut rng, &config, spec, &ep);
            prefixes.push(ep);
        }
        (st, prefixes)
    }

    pub fn trunk_checksum(&self) -> u64 {
        self.store.checksum(ParamGroup::Trunk)
    }

    /// Overwrite trunk parameters from another store (a pretraining
    /// checkpoint). Fails if the trunk configurations disagree.
    pub fn load_trunk_from(&mut self, other: &ParamStore<F>) -> Result<(), String> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|p| p.group == ParamGroup::Trunk)
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            if !other.contains(&name) {
                return Err(format!("trunk parameter {name} missing from checkpoint"));
            }
            let src = other.by_name(&name);
            let slot = self.store.slot(&name);
            if src.value.dim() != self.store.get(slot).value.dim() {
                return Err(format!("trunk parameter {name} has a different shape"));
            }
            self.store.get_mut(slot).value = src.value.clone();
        }
        Ok(())
    }
}

/// Append the embodiment-specific parameter set under a name prefix.
pub fn add_embodiment_params<F: Scalar>(
    st: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    cfg: &MxtConfig,
    spec: &EmbodimentSpec,
    ep: &str,
) {
    let feat = conv_out_channels(cfg);
    if cfg.agg {
        for m in [ObsModality::MainImage, ObsModality::WristImage] {
            if spec.obs_available(m) {
                add_image_encoder(st, rng, cfg, ep, m.name());
            }
        }
        add_tokenizer(st, rng, cfg, ep, "visual", cfg.main_image_tokens, feat, None);
        let proprio_dim: usize = ObsModality::ALL
            .iter()
            .filter(|m| spec.obs_available(**m))
            .filter_map(|m| m.vector_dim())
            .sum();
        let mlp_out = *cfg.tokenizer_mlp.last().unwrap();
        add_tokenizer(st, rng, cfg, ep, "proprio", cfg.proprio_tokens, mlp_out, Some(proprio_dim));
        add_detokenizer(st, rng, cfg, ep, "all", cfg.agg_action_dim());
        return;
    }
    for m in ObsModality::ALL {
        if !spec.obs_available(m) {
            continue;
        }
        match m.vector_dim() {
            None => {
                add_image_encoder(st, rng, cfg, ep, m.name());
                add_tokenizer(st, rng, cfg, ep, m.name(), cfg.obs_tokens(m), feat, None);
            }
            Some(dim) => {
                let mlp_out = *cfg.tokenizer_mlp.last().unwrap();
                add_tokenizer(st, rng, cfg, ep, m.name(), cfg.obs_tokens(m), mlp_out, Some(dim));
            }
        }
    }
    for m in ActModality::ALL {
        add_detokenizer(st, rng, cfg, ep, m.name(), m.dim());
    }
}

/// Fresh embodiment-specific parameters around a bit-identical trunk.
pub fn reinit_for_embodiment<F: Scalar>(
    model: &MxtModel<F>,
    spec: &EmbodimentSpec,
    seed: u64,
) -> MxtModel<F> {
    let mut out = MxtModel::build(model.config.clone(), spec, seed);
    out.load_trunk_from(&model.store)
        .expect("same config, trunk must match");
    out
}

/// Per-forward bookkeeping: leaf tensors for gradient gathering plus the
/// dropout stream.
struct Ctx<'a, F: Scalar> {
    st: &'a ParamStore<F>,
    prefix: &'a str,
    leafs: Vec<Tensor<F>>,
    train: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    fn p(&mut self, name: &str) -> Tensor<F> {
        // Trunk parameters are shared and unprefixed; everything else is
        // scoped to the model's embodiment prefix.
        let t = if name.starts_with("trunk.") || self.prefix.is_empty() {
            self.st.leaf_named(name)
        } else {
            self.st.leaf_named(&format!("{}{}", self.prefix, name))
        };
        self.leafs.push(t.clone());
        t
    }

    fn linear(&mut self, prefix: &str, x: &Tensor<F>) -> Tensor<F> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        add_rowvec(&matmul(x, &w), &b)
    }

    fn ln(&mut self, prefix: &str, x: &Tensor<F>) -> Tensor<F> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        layernorm(x, &g, &b, LN_EPS)
    }

    fn drop(&mut self, x: &Tensor<F>, rate: f64) -> Tensor<F> {
        dropout(x, rate, self.train, self.rng)
    }

    /// Projected multi-head attention: q/k/v/out linear maps around the
    /// attention core.
    #[allow(clippy::too_many_arguments)]
    fn attn(
        &mut self,
        prefix: &str,
        q_in: &Tensor<F>,
        kv_in: &Tensor<F>,
        batch: usize,
        heads: usize,
        key_open: Option<&[bool]>,
    ) -> Tensor<F> {
        let q = self.linear(&format!("{prefix}.q"), q_in);
        let k = self.linear(&format!("{prefix}.k"), kv_in);
        let v = self.linear(&format!("{prefix}.v"), kv_in);
        let a = attention(&q, &k, &v, batch, heads, key_open);
        self.linear(&format!("{prefix}.o"), &a)
    }
}

fn encode_image<F: Scalar>(
    ctx: &mut Ctx<F>,
    cfg: &MxtConfig,
    name: &str,
    img: &Array2<F>,
    batch: usize,
) -> Tensor<F> {
    let [c1, c2] = cfg.conv_channels;
    let c3 = conv_out_channels(cfg);
    let x = Tensor::constant(img.clone());
    let (w1, b1) = conv_weight(ctx, &format!("img.{name}.conv1"));
    let y = gelu(&nn::conv2d(&x, &transpose_w(&w1), &b1, batch, 3, 32, 32, 3, 2, 1));
    let (w2, b2) = conv_weight(ctx, &format!("img.{name}.conv2"));
    let y = gelu(&nn::conv2d(&y, &transpose_w(&w2), &b2, batch, c1, 16, 16, 3, 2, 1));
    let (w3, b3) = conv_weight(ctx, &format!("img.{name}.conv3"));
    let y = gelu(&nn::conv2d(&y, &transpose_w(&w3), &b3, batch, c2, 8, 8, 3, 2, 1));
    debug_assert_eq!(y.shape(), (batch * c3, GRID_CELLS));
    // Channel-major map -> cell-major feature sequence, plus a learned
    // per-cell position code so the grid location survives tokenization.
    let cells = transpose_per_sample(&y, batch);
    let pos = ctx.p(&format!("img.{name}.cellpos"));
    add(&cells, &repeat_rows(&pos, batch))
}

/// Weight matrices are stored (din, dout); conv2d wants (Cout, Cin*k*k).
fn transpose_w<F: Scalar>(w: &Tensor<F>) -> Tensor<F> {
    transpose_per_sample(w, 1)
}

fn tokenize<F: Scalar>(
    ctx: &mut Ctx<F>,
    cfg: &MxtConfig,
    name: &str,
    features: &Tensor<F>,
    batch: usize,
) -> Tensor<F> {
    let queries = ctx.p(&format!("tok.{name}.queries"));
    let q = repeat_rows(&queries, batch);
    let a = ctx.attn(
        &format!("tok.{name}.attn"),
        &q,
        features,
        batch,
        cfg.tokenizer_heads,
        None,
    );
    let a = ctx.drop(&a, cfg.tokenizer_dropout);
    ctx.ln(&format!("tok.{name}.ln"), &add(&q, &a))
}

fn proprio_features<F: Scalar>(
    ctx: &mut Ctx<F>,
    cfg: &MxtConfig,
    name: &str,
    vec: &Array2<F>,
) -> Tensor<F> {
    let mut x = Tensor::constant(vec.clone());
    for i in 0..cfg.tokenizer_mlp.len() {
        x = gelu(&ctx.linear(&format!("tok.{name}.mlp{i}"), &x));
    }
    x
}

/// Tokenize every modality and assemble the trunk input sequence.
///
/// Returns the (B * input_len, hidden) sequence, the per-slot open mask
/// (length input_len; dummy slots of absent modalities are closed), and the
/// leaf tensors used so far.
pub fn tokenize_all<F: Scalar>(
    model: &MxtModel<F>,
    obs: &ObsBatch<F>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor<F>, Vec<bool>, Vec<Tensor<F>>) {
    let cfg = &model.config;
    let b = obs.batch;
    let mut ctx = Ctx {
        st: &model.store,
        prefix: &model.prefix,
        leafs: Vec::new(),
        train,
        rng,
    };

    let (seq, open) = if cfg.agg {
        let mut img_feats = Vec::new();
        for m in [ObsModality::MainImage, ObsModality::WristImage] {
            if let Some(img) = obs.images.get(&m) {
                img_feats.push(encode_image(&mut ctx, cfg, m.name(), img, b));
            }
        }
        let visual_feats = concat_token_groups(&img_feats, b);
        let visual = tokenize(&mut ctx, cfg, "visual", &visual_feats, b);

        let mut cat = Vec::new();
        for m in ObsModality::ALL {
            if let Some(v) = obs.vectors.get(&m) {
                cat.push(v.clone());
            }
        }
        let total: usize = cat.iter().map(|a| a.dim().1).sum();
        let mut joined = Array2::from_elem((b, total), F::ZERO);
        let mut off = 0;
        for a in &cat {
            let w = a.dim().1;
            joined
                .slice_mut(ndarray::s![.., off..off + w])
                .assign(a);
            off += w;
        }
        let feats = proprio_features(&mut ctx, cfg, "proprio", &joined);
        let proprio = tokenize(&mut ctx, cfg, "proprio", &feats, b);

        let total_tokens = cfg.trunk_input_len();
        let seq = concat_token_groups(&[visual, proprio], b);
        (seq, vec![true; total_tokens])
    } else {
        let mut parts: Vec<Tensor<F>> = Vec::new();
        let mut open = Vec::new();
        for m in ObsModality::ALL {
            let tokens = cfg.obs_tokens(m);
            if model.spec.obs_available(m) {
                let toks = match m.vector_dim() {
                    None => {
                        let img = &obs.images[&m];
                        let feats = encode_image(&mut ctx, cfg, m.name(), img, b);
                        tokenize(&mut ctx, cfg, m.name(), &feats, b)
                    }
                    Some(_) => {
                        let feats = proprio_features(&mut ctx, cfg, m.name(), &obs.vectors[&m]);
                        tokenize(&mut ctx, cfg, m.name(), &feats, b)
                    }
                };
                parts.push(toks);
                open.extend(std::iter::repeat(true).take(tokens));
            } else {
                // Dummy slot: zero tokens, blocked as keys downstream.
                parts.push(Tensor::constant(Array2::from_elem(
                    (b * tokens, cfg.hidden),
                    F::ZERO,
                )));
                open.extend(std::iter::repeat(false).take(tokens));
            }
        }
        (concat_token_groups(&parts, b), open)
    };
    (seq, open, ctx.leafs)
}

/// Trunk plus detokenizers over an assembled token sequence. Exposed
/// separately from `forward` so masking invariance can be probed by
/// perturbing dummy slots directly.
pub fn forward_from_tokens<F: Scalar>(
    model: &MxtModel<F>,
    seq: &Tensor<F>,
    slot_open: &[bool],
    batch: usize,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (BTreeMap<ActModality, Tensor<F>>, Vec<Tensor<F>>) {
    let cfg = &model.config;
    let lin = cfg.trunk_input_len();
    assert_eq!(slot_open.len(), lin, "slot mask length");
    assert_eq!(seq.shape(), (batch * lin, cfg.hidden), "trunk input shape");
    let mut ctx = Ctx {
        st: &model.store,
        prefix: &model.prefix,
        leafs: Vec::new(),
        train,
        rng,
    };
    let key_open: Vec<bool> = (0..batch * lin).map(|i| slot_open[i % lin]).collect();

    let mut x = seq.clone();
    for l in 0..cfg.encoder_layers {
        let p = format!("trunk.enc{l}");
        let h1 = ctx.ln(&format!("{p}.ln1"), &x);
        let a = ctx.attn(&format!("{p}.attn"), &h1, &h1, batch, cfg.trunk_heads, Some(&key_open));
        x = add(&x, &ctx.drop(&a, cfg.trunk_dropout));
        let h2 = ctx.ln(&format!("{p}.ln2"), &x);
        let f1 = gelu(&ctx.linear(&format!("{p}.ff1"), &h2));
        let f = ctx.linear(&format!("{p}.ff2"), &f1);
        x = add(&x, &ctx.drop(&f, cfg.trunk_dropout));
    }
    let mem = ctx.ln("trunk.mem_ln", &x);

    // Learned readout queries, one slice per detokenizer in act-slot order.
    let queries = if cfg.agg {
        ctx.p("detok.all.trunk_queries")
    } else {
        let parts: Vec<Tensor<F>> = ActModality::ALL
            .iter()
            .map(|m| ctx.p(&format!("detok.{}.trunk_queries", m.name())))
            .collect();
        concat_token_groups(&parts, 1)
    };
    let mut y = repeat_rows(&queries, batch);
    for l in 0..cfg.decoder_layers {
        let p = format!("trunk.dec{l}");
        let h1 = ctx.ln(&format!("{p}.ln1"), &y);
        let a = ctx.attn(&format!("{p}.self"), &h1, &h1, batch, cfg.trunk_heads, None);
        y = add(&y, &ctx.drop(&a, cfg.trunk_dropout));
        let hq = ctx.ln(&format!("{p}.ln_q"), &y);
        let c = ctx.attn(&format!("{p}.cross"), &hq, &mem, batch, cfg.trunk_heads, Some(&key_open));
        y = add(&y, &ctx.drop(&c, cfg.trunk_dropout));
        let h2 = ctx.ln(&format!("{p}.ln2"), &y);
        let f1 = gelu(&ctx.linear(&format!("{p}.ff1"), &h2));
        let f = ctx.linear(&format!("{p}.ff2"), &f1);
        y = add(&y, &ctx.drop(&f, cfg.trunk_dropout));
    }
    let y = ctx.ln("trunk.out_ln", &y);

    let lout = cfg.trunk_output_len();
    let mut chunks = BTreeMap::new();
    if cfg.agg {
        let out = detokenize(&mut ctx, cfg, "all", &y, batch);
        // Split the h x 20 chunk back into per-modality chunks.
        let mut off = 0;
        for m in ActModality::ALL {
            let dim = m.dim();
            let sliced = slice_cols(&out, off..off + dim);
            chunks.insert(m, sliced);
            off += dim;
        }
    } else {
        for m in ActModality::ALL {
            let r = cfg.act_slot(m);
            let toks = slice_token_range(&y, batch, lout, r);
            chunks.insert(m, detokenize(&mut ctx, cfg, m.name(), &toks, batch));
        }
    }
    (chunks, ctx.leafs)
}

fn detokenize<F: Scalar>(
    ctx: &mut Ctx<F>,
    cfg: &MxtConfig,
    name: &str,
    latent: &Tensor<F>,
    batch: usize,
) -> Tensor<F> {
    let steps = ctx.p(&format!("detok.{name}.step_queries"));
    let q = repeat_rows(&steps, batch);
    let a = ctx.attn(&format!("detok.{name}.attn"), &q, latent, batch, cfg.detok_heads, None);
    let a = ctx.drop(&a, cfg.detok_dropout);
    let x = ctx.ln(&format!("detok.{name}.ln"), &add(&q, &a));
    ctx.linear(&format!("detok.{name}.out"), &x)
}

/// Column slice as an op (used to split the aggregated action vector).
fn slice_cols<F: Scalar>(x: &Tensor<F>, range: std::ops::Range<usize>) -> Tensor<F> {
    let (rows, cols) = x.shape();
    assert!(range.end <= cols);
    let value = x
        .value()
        .slice(ndarray::s![.., range.start..range.end])
        .to_owned();
    let (start, len) = (range.start, range.end - range.start);
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = Array2::from_elem((rows, cols), F::ZERO);
            dx.slice_mut(ndarray::s![.., start..start + len]).assign(g);
            parents[0].accumulate_grad(&dx);
        }),
    )
}

/// Full forward pass: tokenize, assemble, trunk, detokenize. Returns one
/// (B*h, dim) chunk tensor per action modality (all modalities emitted; the
/// loss masks absent ones) and every parameter leaf used.
pub fn forward<F: Scalar>(
    model: &MxtModel<F>,
    obs: &ObsBatch<F>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (BTreeMap<ActModality, Tensor<F>>, Vec<Tensor<F>>) {
    let (seq, open, mut leafs) = tokenize_all(model, obs, train, rng);
    let (chunks, more) = forward_from_tokens(model, &seq, &open, obs.batch, train, rng);
    leafs.extend(more);
    (chunks, leafs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embodiment::builtin;
    use rand::Rng;

    fn random_obs_batch(spec: &EmbodimentSpec, batch: usize, seed: u64) -> ObsBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for m in ObsModality::ALL {
            if !spec.obs_available(m) {
                continue;
            }
            match m.vector_dim() {
                None => {
                    images.insert(
                        m,
                        Array2::from_shape_fn((batch * 3, 1024), |_| rng.gen::<f64>() - 0.5),
                    );
                }
                Some(d) => {
                    vectors.insert(
                        m,
                        Array2::from_shape_fn((batch, d), |_| rng.gen::<f64>() - 0.5),
                    );
                }
            }
        }
        ObsBatch {
            batch,
            images,
            vectors,
        }
    }

    #[test]
    fn forward_shapes_all_embodiments() {
        let cfg = MxtConfig::tiny(3);
        for name in crate::embodiment::BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let model: MxtModel<f64> = MxtModel::build(cfg.clone(), &spec, 7);
            let obs = random_obs_batch(&spec, 2, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (chunks, _) = forward(&model, &obs, false, &mut rng);
            assert_eq!(chunks.len(), 3, "{name}: all modalities emitted");
            for m in ActModality::ALL {
                assert_eq!(chunks[&m].shape(), (2 * 3, m.dim()), "{name}/{}", m.name());
            }
        }
    }

    #[test]
    fn chunk_of_one_step() {
        let cfg = MxtConfig::tiny(1);
        let spec = builtin("locoman-uni-r").unwrap();
        let model: MxtModel<f64> = MxtModel::build(cfg, &spec, 7);
        let obs = random_obs_batch(&spec, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (chunks, _) = forward(&model, &obs, false, &mut rng);
        assert_eq!(chunks[&ActModality::EefPose].shape(), (1, 12));
    }

    #[test]
    fn eval_forward_is_bit_reproducible() {
        let cfg = MxtConfig::tiny(2);
        let spec = builtin("human-bi").unwrap();
        let model: MxtModel<f64> = MxtModel::build(cfg, &spec, 9);
        let obs = random_obs_batch(&spec, 2, 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(99); // rng unused in eval mode
        let (c1, _) = forward(&model, &obs, false, &mut r1);
        let (c2, _) = forward(&model, &obs, false, &mut r2);
        for m in ActModality::ALL {
            assert_eq!(c1[&m].value(), c2[&m].value());
        }
    }

    #[test]
    fn dummy_token_perturbation_changes_nothing() {
        let cfg = MxtConfig::tiny(2);
        let spec = builtin("human-uni-r").unwrap(); // wrist image absent
        let model: MxtModel<f64> = MxtModel::build(cfg.clone(), &spec, 11);
        let obs = random_obs_batch(&spec, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (seq, open, _) = tokenize_all(&model, &obs, false, &mut rng);
        let wrist = cfg.obs_slot(ObsModality::WristImage);
        assert!(open[wrist.clone()].iter().all(|&o| !o));

        let (c1, _) = forward_from_tokens(&model, &seq, &open, 2, false, &mut rng);
        // Overwrite the dummy slots with garbage.
        let lin = cfg.trunk_input_len();
        let mut v = seq.value().clone();
        for b in 0..2 {
            for t in wrist.clone() {
                for c in 0..cfg.hidden {
                    v[[b * lin + t, c]] = 1e6 * (1.0 + (b + t + c) as f64);
                }
            }
        }
        let (c2, _) =
            forward_from_tokens(&model, &Tensor::constant(v), &open, 2, false, &mut rng);
        for m in ActModality::ALL {
            assert_eq!(c1[&m].value(), c2[&m].value(), "{}", m.name());
        }
    }

    #[test]
    fn output_depends_on_main_image() {
        let cfg = MxtConfig::tiny(2);
        let spec = builtin("locoman-bi").unwrap();
        let model: MxtModel<f64> = MxtModel::build(cfg, &spec, 13);
        let mut obs = random_obs_batch(&spec, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c1, _) = forward(&model, &obs, false, &mut rng);
        obs.images.get_mut(&ObsModality::MainImage).unwrap()[[0, 100]] += 3.0;
        let (c2, _) = forward(&model, &obs, false, &mut rng);
        assert_ne!(
            c1[&ActModality::EefPose].value(),
            c2[&ActModality::EefPose].value()
        );
    }

    #[test]
    fn reinit_preserves_trunk_exactly() {
        let cfg = MxtConfig::tiny(2);
        let human = builtin("human-uni-r").unwrap();
        let robot = builtin("locoman-uni-r").unwrap();
        let m1: MxtModel<f64> = MxtModel::build(cfg, &human, 21);
        let before = m1.trunk_checksum();
        let m2 = reinit_for_embodiment(&m1, &robot, 22);
        assert_eq!(m2.trunk_checksum(), before);
        // Embodiment-specific params for a shared modality are fresh.
        let a = &m1.store.by_name("tok.body_pose.queries").value;
        let b = &m2.store.by_name("tok.body_pose.queries").value;
        assert_ne!(a, b);
        // Same seed, same result.
        let m3 = reinit_for_embodiment(&m1, &robot, 22);
        assert_eq!(
            m3.store.checksum(ParamGroup::EmbodimentSpecific),
            m2.store.checksum(ParamGroup::EmbodimentSpecific)
        );
    }

    #[test]
    fn load_trunk_rejects_mismatched_config() {
        let spec = builtin("human-uni-r").unwrap();
        let m1: MxtModel<f64> = MxtModel::build(MxtConfig::tiny(2), &spec, 1);
        let mut big = MxtConfig::tiny(2);
        big.hidden = 32;
        big.trunk_heads = 2;
        big.tokenizer_mlp = vec![32, 32];
        let mut m2: MxtModel<f64> = MxtModel::build(big, &spec, 1);
        assert!(m2.load_trunk_from(&m1.store).is_err());
    }

    #[test]
    fn agg_variant_shapes_and_trunk_compat() {
        let mut cfg = MxtConfig::tiny(3);
        cfg.agg = true;
        let spec = builtin("locoman-uni-r").unwrap();
        let model: MxtModel<f64> = MxtModel::build(cfg.clone(), &spec, 31);
        let obs = random_obs_batch(&spec, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (chunks, _) = forward(&model, &obs, false, &mut rng);
        for m in ActModality::ALL {
            assert_eq!(chunks[&m].shape(), (2 * 3, m.dim()));
        }
        // Trunk params transfer between agg and standard builds.
        let mut std_cfg = cfg.clone();
        std_cfg.agg = false;
        let mut std_model: MxtModel<f64> = MxtModel::build(std_cfg, &spec, 32);
        std_model.load_trunk_from(&model.store).unwrap();
        assert_eq!(std_model.trunk_checksum(), model.trunk_checksum());
    }

    #[test]
    fn same_seed_same_model() {
        let spec = builtin("locoman-bi").unwrap();
        let a: MxtModel<f32> = MxtModel::build(MxtConfig::tiny(2), &spec, 5);
        let b: MxtModel<f32> = MxtModel::build(MxtConfig::tiny(2), &spec, 5);
        assert_eq!(
            a.store.checksum(ParamGroup::Trunk),
            b.store.checksum(ParamGroup::Trunk)
        );
        assert_eq!(
            a.store.checksum(ParamGroup::EmbodimentSpecific),
            b.store.checksum(ParamGroup::EmbodimentSpecific)
        );
    }
}
