//! Named parameter storage with an alias table for shared CTC heads, plus the
//! per-pass binding that leafs parameters into a fresh graph.

use super::{CtcSharing, ModelConfig, Stage, Tap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// All trainable weights, keyed by canonical path. Alias paths resolve to a
/// canonical path, so shared heads read and write the same storage.
#[derive(Debug, Clone)]
pub struct ParameterSet<F: Scalar> {
    entries: BTreeMap<String, Param<F>>,
    aliases: BTreeMap<String, String>,
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: &str, shape: Vec<usize>, data: Vec<F>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {path}: shape/data mismatch"
        );
        assert!(
            !self.aliases.contains_key(path),
            "param {path} already exists as an alias"
        );
        self.entries.insert(path.to_string(), Param { shape, data });
    }

    /// Declares `path` as an alias of `target` (which must be canonical).
    pub fn add_alias(&mut self, path: &str, target: &str) {
        assert!(
            self.entries.contains_key(target),
            "alias target {target} missing"
        );
        assert!(
            !self.entries.contains_key(path),
            "alias {path} shadows a canonical param"
        );
        self.aliases.insert(path.to_string(), target.to_string());
    }

    /// Canonical path behind `path` (identity for canonical paths).
    pub fn resolve<'a>(&'a self, path: &'a str) -> &'a str {
        self.aliases.get(path).map(|s| s.as_str()).unwrap_or(path)
    }

    pub fn get(&self, path: &str) -> Result<&Param<F>> {
        let canonical = self.resolve(path);
        self.entries
            .get(canonical)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))
    }

    pub fn set_data(&mut self, path: &str, data: Vec<F>) -> Result<()> {
        let canonical = self.resolve(path).to_string();
        let p = self
            .entries
            .get_mut(&canonical)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))?;
        if p.data.len() != data.len() {
            return Err(Error::Dimension(format!(
                "parameter {path}: new data length {} != {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        let canonical = self.resolve(path);
        self.entries.contains_key(canonical)
    }

    /// Canonical entries, in stable (sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, &str)> {
        self.aliases.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Total elements in parameters whose canonical path matches `pred`.
    pub fn count_params_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    /// Copies every canonical entry that also exists in `other` from `other`.
    pub fn copy_matching_from(&mut self, other: &ParameterSet<F>) -> usize {
        let mut copied = 0;
        for (name, param) in self.entries.iter_mut() {
            if let Some(src) = other.entries.get(name) {
                assert_eq!(param.shape, src.shape, "shape drift for {name}");
                param.data = src.data.clone();
                copied += 1;
            }
        }
        copied
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        let mut out = ParameterSet::new();
        for (name, p) in self.entries.iter() {
            out.insert(
                name,
                p.shape.clone(),
                p.data.iter().map(|&v| G::of_f64(v.as_f64())).collect(),
            );
        }
        for (a, t) in self.aliases.iter() {
            out.add_alias(a, t);
        }
        out
    }
}

/// Paths of the CTC head serving a tap. Aliasing picks the first tap of each
/// sharing group (in `s_l`, `s_h`, `ns_h` order) as canonical, so the bottom
/// head is always stored under `ctc.s_l.*`.
pub fn ctc_head_prefix(tap: Tap) -> String {
    format!("ctc.{}", tap.path_segment())
}

fn ctc_alias_groups(sharing: CtcSharing) -> Vec<(Tap, Option<Tap>)> {
    // (tap, aliased-to); None means canonical storage.
    match sharing {
        CtcSharing::C1 => vec![
            (Tap::StreamingBottom, None),
            (Tap::StreamingTop, None),
            (Tap::NonStreamingTop, Some(Tap::StreamingTop)),
        ],
        CtcSharing::C2 => vec![
            (Tap::StreamingBottom, None),
            (Tap::StreamingTop, None),
            (Tap::NonStreamingTop, Some(Tap::StreamingBottom)),
        ],
        CtcSharing::C3 => vec![
            (Tap::StreamingBottom, None),
            (Tap::StreamingTop, Some(Tap::StreamingBottom)),
            (Tap::NonStreamingTop, Some(Tap::StreamingBottom)),
        ],
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<F: Scalar>(&mut self, n: usize, bound: f64) -> Vec<F> {
        (0..n)
            .map(|_| F::of_f64(self.rng.gen_range(-bound..bound)))
            .collect()
    }

    /// PyTorch-style default linear init: U(+-1/sqrt(fan_in)).
    fn linear<F: Scalar>(&mut self, params: &mut ParameterSet<F>, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(fan_in * fan_out, bound);
        params.insert(&format!("{prefix}.w"), vec![fan_in, fan_out], w);
        params.insert(
            &format!("{prefix}.b"),
            vec![fan_out],
            vec![F::zero(); fan_out],
        );
    }

    fn layer_norm<F: Scalar>(&mut self, params: &mut ParameterSet<F>, prefix: &str, d: usize) {
        params.insert(&format!("{prefix}.g"), vec![d], vec![F::one(); d]);
        params.insert(&format!("{prefix}.b"), vec![d], vec![F::zero(); d]);
    }

    fn conv<F: Scalar>(
        &mut self,
        params: &mut ParameterSet<F>,
        prefix: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
    ) {
        let bound = 1.0 / ((k * c_in) as f64).sqrt();
        let w = self.uniform(k * c_in * c_out, bound);
        params.insert(&format!("{prefix}.w"), vec![k, c_in, c_out], w);
        params.insert(&format!("{prefix}.b"), vec![c_out], vec![F::zero(); c_out]);
    }
}

fn init_conformer_layer<F: Scalar>(
    init: &mut Init,
    params: &mut ParameterSet<F>,
    prefix: &str,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    let k = cfg.conv_kernel;
    init.layer_norm(params, &format!("{prefix}.ln_ff1"), d);
    init.linear(params, &format!("{prefix}.ff1.lin1"), d, cfg.d_ff);
    init.linear(params, &format!("{prefix}.ff1.lin2"), cfg.d_ff, d);
    init.layer_norm(params, &format!("{prefix}.ln_attn"), d);
    for name in ["wq", "wk", "wv", "wo"] {
        init.linear(params, &format!("{prefix}.attn.{name}"), d, d);
    }
    init.layer_norm(params, &format!("{prefix}.ln_conv"), d);
    init.linear(params, &format!("{prefix}.conv.pw1"), d, 2 * d);
    let bound = 1.0 / (k as f64).sqrt();
    let causal = init.uniform(k * d, bound);
    params.insert(&format!("{prefix}.conv.causal.kernel"), vec![k, d], causal);
    let centered = init.uniform(k * d, bound);
    params.insert(&format!("{prefix}.conv.centered.kernel"), vec![k, d], centered);
    init.layer_norm(params, &format!("{prefix}.conv.ln"), d);
    init.linear(params, &format!("{prefix}.conv.pw2"), d, d);
    init.layer_norm(params, &format!("{prefix}.ln_ff2"), d);
    init.linear(params, &format!("{prefix}.ff2.lin1"), d, cfg.d_ff);
    init.linear(params, &format!("{prefix}.ff2.lin2"), cfg.d_ff, d);
    init.layer_norm(params, &format!("{prefix}.ln_final"), d);
}

fn init_decoder<F: Scalar>(
    init: &mut Init,
    params: &mut ParameterSet<F>,
    prefix: &str,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let scale = 1.0 / (d as f64).sqrt();
    let emb = init.uniform(v * d, scale);
    params.insert(&format!("{prefix}.embed"), vec![v, d], emb);
    for l in 0..cfg.decoder_layers {
        let lp = format!("{prefix}.layer{l}");
        init.layer_norm(params, &format!("{lp}.ln_self"), d);
        for name in ["wq", "wk", "wv", "wo"] {
            init.linear(params, &format!("{lp}.self.{name}"), d, d);
        }
        init.layer_norm(params, &format!("{lp}.ln_cross"), d);
        for name in ["wq", "wk", "wv", "wo"] {
            init.linear(params, &format!("{lp}.cross.{name}"), d, d);
        }
        init.layer_norm(params, &format!("{lp}.ln_ff"), d);
        init.linear(params, &format!("{lp}.ff.lin1"), d, cfg.d_ff);
        init.linear(params, &format!("{lp}.ff.lin2"), cfg.d_ff, d);
    }
    init.layer_norm(params, &format!("{prefix}.ln_final"), d);
    init.linear(params, &format!("{prefix}.out"), d, v);
}

/// Freshly initialized parameters for a stage of the architecture.
pub fn init_parameters<F: Scalar>(cfg: &ModelConfig, stage: Stage, seed: u64) -> Result<ParameterSet<F>> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut params = ParameterSet::new();
    let d = cfg.d_model;

    init.conv(&mut params, "sub.conv1", 3, cfg.feat_dim, d);
    init.conv(&mut params, "sub.conv2", 3, d, d);

    for i in 0..cfg.bottom_depth(stage) {
        init_conformer_layer(&mut init, &mut params, &format!("enc.bottom.{i}"), cfg);
    }
    for j in 0..cfg.m {
        init_conformer_layer(&mut init, &mut params, &format!("enc.top.{j}"), cfg);
    }

    // CTC heads: canonical storage first, then aliases per sharing variant.
    for (tap, target) in ctc_alias_groups(cfg.ctc_sharing) {
        let prefix = ctc_head_prefix(tap);
        match target {
            None => init.linear(&mut params, &prefix, d, cfg.vocab_size),
            Some(target_tap) => {
                let tp = ctc_head_prefix(target_tap);
                params.add_alias(&format!("{prefix}.w"), &format!("{tp}.w"));
                params.add_alias(&format!("{prefix}.b"), &format!("{tp}.b"));
            }
        }
    }

    init_decoder(&mut init, &mut params, "dec.l2r", cfg);
    init_decoder(&mut init, &mut params, "dec.r2l", cfg);
    Ok(params)
}

/// Per-pass view of a [`ParameterSet`] on a graph. Each canonical parameter is
/// leafed into the graph at most once, so aliased paths share one node and
/// gradients from all uses accumulate together.
pub struct Binding<'a, F: Scalar> {
    pub params: &'a ParameterSet<F>,
    pub graph: Graph<F>,
    trainable: bool,
    cache: RefCell<HashMap<String, Tensor<F>>>,
    dropout: Option<RefCell<ChaCha8Rng>>,
    dropout_rate: f64,
}

impl<'a, F: Scalar> Binding<'a, F> {
    pub fn new(params: &'a ParameterSet<F>, graph: Graph<F>, trainable: bool) -> Self {
        Binding {
            params,
            graph,
            trainable,
            cache: RefCell::new(HashMap::new()),
            dropout: None,
            dropout_rate: 0.0,
        }
    }

    /// Enables seeded dropout masks for this pass.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
            self.dropout_rate = rate;
        }
        self
    }

    pub fn get(&self, path: &str) -> Tensor<F> {
        let canonical = self.params.resolve(path).to_string();
        if let Some(t) = self.cache.borrow().get(&canonical) {
            return t.clone();
        }
        let p = self
            .params
            .get(&canonical)
            .unwrap_or_else(|e| panic!("{e}"));
        let t = self
            .graph
            .leaf(&p.shape, p.data.clone(), self.trainable);
        self.cache
            .borrow_mut()
            .insert(canonical, t.clone());
        t
    }

    /// `x @ w + b` with parameters at `prefix.w` / `prefix.b`.
    pub fn linear(&self, prefix: &str, x: &Tensor<F>) -> Tensor<F> {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        x.matmul(&w)
            .unwrap_or_else(|e| panic!("linear {prefix}: {e}"))
            .add_row(&b)
    }

    pub fn layer_norm(&self, prefix: &str, x: &Tensor<F>) -> Tensor<F> {
        let g = self.get(&format!("{prefix}.g"));
        let b = self.get(&format!("{prefix}.b"));
        x.layer_norm(&g, &b, F::of_f64(1e-5))
            .unwrap_or_else(|e| panic!("layer_norm {prefix}: {e}"))
    }

    /// Identity when the rate is zero; otherwise a seeded inverted-scale mask.
    pub fn dropout(&self, x: &Tensor<F>) -> Tensor<F> {
        let Some(rng) = &self.dropout else {
            return x.clone();
        };
        let keep = 1.0 - self.dropout_rate;
        let scale = F::of_f64(1.0 / keep);
        let mut rng = rng.borrow_mut();
        let mask: Vec<F> = (0..x.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let mask = self.graph.constant(x.shape(), mask);
        x.mul(&mask)
    }

    /// Gradients accumulated on bound parameters, keyed by canonical path.
    pub fn grads(&self) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in self.cache.borrow().iter() {
            if let Some(g) = tensor.grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
