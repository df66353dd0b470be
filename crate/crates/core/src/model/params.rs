use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::RunningStats;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Trainable and weight-decayed.
    Weight,
    /// Trainable, exempt from weight decay (norm affine, relative-bias tables).
    NoDecay,
    /// Batch-norm running statistic; never receives gradients.
    RunningStat,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::RunningStat
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub role: ParamRole,
}

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, role: ParamRole) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = role.trainable();
        self.entries.insert(name, ParamEntry { tensor, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.iter().filter(|(_, e)| e.role.trainable()).map(|(_, e)| e.tensor.numel()).sum()
    }

    /// Adds gradients keyed by parameter name.
    pub fn accumulate_grads(&mut self, grads: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, g) in grads {
            self.tensor_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.tensor(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.tensor(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) -> Result<()> {
        self.tensor_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&stats.mean);
        self.tensor_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&stats.var);
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> Result<()> {
        let t = self.trunc_normal(shape);
        self.store.insert(name, t, ParamRole::Weight)
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), &[c_out, c_in, k, k])?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros([c_out]), ParamRole::Weight)
    }

    fn linear(&mut self, prefix: &str, d_out: usize, d_in: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), &[d_out, d_in])?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros([d_out]), ParamRole::Weight)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::full([d], 1.0), ParamRole::NoDecay)?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros([d]), ParamRole::NoDecay)
    }
}

/// Number of entries in a relative-position table for an `h×w` query grid.
pub fn relative_table_len(h: usize, w: usize) -> usize {
    (2 * h - 1) * (2 * w - 1)
}

/// Builds every parameter of the network, deterministically in `cfg.seed`.
/// Conv/linear weights are N(0, 0.02²) truncated at two standard
/// deviations; biases, norm shifts and relative-bias tables start at zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed), store: ParamStore::new() };
    let (stem, e) = (cfg.stem_channels, cfg.embed_dim);

    init.conv("grain.conv1", stem, cfg.in_channels, 3)?;
    init.conv("grain.conv2", stem, stem, 3)?;
    init.conv("grain.conv3", stem, stem, 3)?;
    init.conv("grain.agg", e, stem, 2)?;
    init.norm("grain.norm", e)?;

    let grid = cfg.grid_size();
    for b in 0..cfg.num_lmhsa_blocks {
        let p = format!("attn.{b}");
        init.weight(format!("{p}.lpu.weight"), &[e, 1, 3, 3])?;
        init.norm(&format!("{p}.norm"), e)?;
        init.linear(&format!("{p}.q"), e, e)?;
        if cfg.kv_reduction > 1 {
            let r = cfg.kv_reduction;
            init.weight(format!("{p}.reduce.weight"), &[e, 1, r, r])?;
        }
        init.linear(&format!("{p}.k"), e, e)?;
        init.linear(&format!("{p}.v"), e, e)?;
        init.linear(&format!("{p}.out"), e, e)?;
        init.store.insert(
            format!("{p}.rel_bias"),
            Tensor::zeros([cfg.num_heads, relative_table_len(grid, grid)]),
            ParamRole::NoDecay,
        )?;
        let hidden = e * cfg.mlp_conv_hidden_ratio;
        init.conv(&format!("{p}.mlp.fc1"), hidden, e, 1)?;
        init.conv(&format!("{p}.mlp.fc2"), e, hidden, 1)?;
    }

    let mut c_in = e;
    for (j, &c_out) in cfg.cnn_channels.iter().enumerate() {
        let p = format!("cnn.{j}");
        init.conv(&format!("{p}.conv"), c_out, c_in, 3)?;
        init.norm(&format!("{p}.bn"), c_out)?;
        let stats = RunningStats::new(c_out);
        init.store.insert(format!("{p}.bn.running_mean"), Tensor::new([c_out], stats.mean)?, ParamRole::RunningStat)?;
        init.store.insert(format!("{p}.bn.running_var"), Tensor::new([c_out], stats.var)?, ParamRole::RunningStat)?;
        c_in = c_out;
    }

    let d = cfg.fused_dim();
    init.linear("head.fc1", d * cfg.ffn_expansion, d)?;
    init.linear("head.fc2", cfg.num_classes, d * cfg.ffn_expansion)?;
    Ok(init.store)
}
