use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::network::{Network, NetworkConfig};
use crate::{Error, Result};

use super::config::RunConfig;
use super::optim::{AdamW, AdamWConfig};

const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "nulite";
const PARAM_PREFIX: &str = "model.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamWConfig,
    pub step: u64,
    pub lr: f64,
}

/// Everything besides tensors, stored as JSON in the file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    /// Fused (inference) form when true.
    pub reparameterized: bool,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub normalization: Normalization,
    pub optimizer: Option<OptimizerSnapshot>,
    pub run: Option<RunConfig>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    /// First and second moments keyed by parameter name.
    pub optimizer_state: BTreeMap<String, (Tensor, Tensor)>,
}

impl Checkpoint {
    /// Network of the stored form with the stored weights.
    pub fn network(&self) -> Result<Network> {
        let net = Network::skeleton(&self.meta.network, self.meta.reparameterized)?;
        net.store().load_tensors(&self.params)?;
        Ok(net)
    }

    /// Restores optimizer moments into `opt`.
    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        let snap = self.meta.optimizer.as_ref().ok_or_else(|| Error::Checkpoint("no optimizer state stored".into()))?;
        opt.load_state(snap.step, |name| self.optimizer_state.get(name).cloned())?;
        opt.set_learning_rate(snap.lr);
        Ok(())
    }
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.dtype() != DType::F32 {
        return Err(Error::Checkpoint(format!("only f32 tensors are stored, got {:?}", t.dtype())));
    }
    Ok(t.flatten_all()?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect())
}

fn st_err(path: &Path) -> impl Fn(safetensors::SafeTensorError) -> Error + '_ {
    move |e| Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes weights, optional optimizer moments and metadata to one
/// safetensors file. Values are stored bit for bit.
pub fn save_checkpoint(path: &Path, network: &Network, meta: &CheckpointMeta, optimizer: Option<&AdamW>) -> Result<()> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, t) in network.store().tensors()? {
        blobs.push((format!("{PARAM_PREFIX}{name}"), t.dims().to_vec(), f32_bytes(&t)?));
    }
    if let Some(opt) = optimizer {
        for (name, m, v) in opt.state() {
            blobs.push((format!("{M_PREFIX}{name}"), m.dims().to_vec(), f32_bytes(m)?));
            blobs.push((format!("{V_PREFIX}{name}"), v.dims().to_vec(), f32_bytes(v)?));
        }
    }
    let views = blobs
        .iter()
        .map(|(n, shape, data)| Ok((n.clone(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(st_err(path))?)))
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(header), path).map_err(st_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(st_err(path))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no `{META_KEY}` metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(st_err(path))?;
    let mut params = BTreeMap::new();
    let (mut ms, mut vs) = (BTreeMap::new(), BTreeMap::new());
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
        }
        let values: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(M_PREFIX) {
            ms.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(V_PREFIX) {
            vs.insert(n.to_string(), t);
        }
    }
    let optimizer_state = ms.into_iter().filter_map(|(n, m)| vs.remove(&n).map(|v| (n, (m, v)))).collect();
    Ok(Checkpoint { meta, params, optimizer_state })
}

impl CheckpointMeta {
    pub fn for_network(network: &Network, normalization: Normalization) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            network: network.config().clone(),
            reparameterized: network.is_reparameterized(),
            epoch: 0,
            global_step: 0,
            normalization,
            optimizer: None,
            run: None,
        }
    }
}
