//! Model checkpoints in the [`tensorfile`](crate::tensorfile) container. The
//! header records the model kind and its configuration; batch-norm running
//! statistics are stored as `<layer>.running_mean` / `<layer>.running_var`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lvseg_core::autodiff::{BatchStats, Tensor};
use lvseg_core::detector::{BoxRegressor, DetectorConfig};
use lvseg_core::nn::ParamSet;
use lvseg_core::tfcnn::{Network, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::tensorfile::{self, NamedTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelMeta {
    Network { config: NetworkConfig },
    Detector { config: DetectorConfig },
}

fn param_tensors(params: &ParamSet) -> Vec<NamedTensor> {
    params.iter().map(|p| NamedTensor::new(p.name.clone(), p.value.shape(), p.value.data().to_vec())).collect()
}

fn load_params(params: &mut ParamSet, tensors: &[NamedTensor]) -> Result<()> {
    let named = tensors
        .iter()
        .map(|t| Ok((t.name.clone(), Tensor::new(&t.shape, t.data.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    params.load(&named)?;
    Ok(())
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let mut tensors = param_tensors(net.params());
    for (name, s) in net.running_stats() {
        tensors.push(NamedTensor::new(format!("{}.running_mean", name), &[s.mean.len()], s.mean.clone()));
        tensors.push(NamedTensor::new(format!("{}.running_var", name), &[s.var.len()], s.var.clone()));
    }
    tensorfile::write(path, &ModelMeta::Network { config: net.config().clone() }, &tensors)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let (meta, tensors): (ModelMeta, _) = tensorfile::read(path)?;
    let ModelMeta::Network { config } = meta else {
        bail!("{} is not a segmentation network checkpoint", path.display());
    };
    let mut net = Network::build(&config)?;
    let n = net.params().len();
    ensure!(tensors.len() >= n, "{} holds {} tensors, the network has {} parameters", path.display(), tensors.len(), n);
    load_params(net.params_mut(), &tensors[..n]).with_context(|| format!("loading {}", path.display()))?;
    let rest = &tensors[n..];
    ensure!(rest.len() % 2 == 0, "{}: unpaired running statistics", path.display());
    let mut stats = Vec::with_capacity(rest.len() / 2);
    for pair in rest.chunks_exact(2) {
        let (m, v) = (&pair[0], &pair[1]);
        let Some(layer) = m.name.strip_suffix(".running_mean") else {
            bail!("{}: expected running mean, found {}", path.display(), m.name);
        };
        ensure!(v.name == format!("{}.running_var", layer), "{}: expected running variance of {}, found {}", path.display(), layer, v.name);
        stats.push((layer.to_string(), BatchStats { mean: m.data.clone(), var: v.data.clone() }));
    }
    net.set_running_stats(stats)?;
    Ok(net)
}

pub fn save_detector(path: &Path, det: &BoxRegressor) -> Result<()> {
    tensorfile::write(path, &ModelMeta::Detector { config: det.config().clone() }, &param_tensors(det.params()))
}

pub fn load_detector(path: &Path) -> Result<BoxRegressor> {
    let (meta, tensors): (ModelMeta, _) = tensorfile::read(path)?;
    let ModelMeta::Detector { config } = meta else {
        bail!("{} is not a detector checkpoint", path.display());
    };
    let mut det = BoxRegressor::build(&config)?;
    load_params(det.params_mut(), &tensors).with_context(|| format!("loading {}", path.display()))?;
    Ok(det)
}
