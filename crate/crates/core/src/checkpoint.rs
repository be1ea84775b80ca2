//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MSNN"  version  header_len  header (TOML, UTF-8)
//! tensor_count
//! repeated: name_len name rank dims[rank] values[prod(dims)] as f32
//! ```
//!
//! The header carries the network configuration, clip state, activation
//! ranges and metadata. Tensors carry weights, biases, batch-norm affine
//! terms and running statistics, and the activation thresholds.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{ClipState, CLIPPED_LAYERS};
use crate::error::{Error, Result};
use crate::model::{BnParams, LayerParams, Metadata, NetworkConfig, NetworkState, LAYER_NAMES};
use crate::noise::LAYERS;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSNN";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    clip: ClipState,
    act_range: [f64; CLIPPED_LAYERS],
    meta: Metadata,
}

fn named_tensors(state: &NetworkState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        out.push((format!("{name}.weight"), state.layers[l].weight.clone()));
        out.push((format!("{name}.bias"), state.layers[l].bias.clone()));
        if let Some(bn) = &state.bn[l] {
            let c = bn.running_mean.len();
            out.push((format!("{name}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("{name}.bn.beta"), bn.beta.clone()));
            out.push((
                format!("{name}.bn.running_mean"),
                Tensor::from_fn(&[c], |i| bn.running_mean[i]),
            ));
            out.push((
                format!("{name}.bn.running_var"),
                Tensor::from_fn(&[c], |i| bn.running_var[i]),
            ));
        }
    }
    out.push((
        "clip.y_thr".into(),
        Tensor::from_fn(&[CLIPPED_LAYERS], |i| state.clip.y_thr[i]),
    ));
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::data("checkpoint field exceeds u32"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(state: &NetworkState) -> Result<Vec<u8>> {
    let mut clip = state.clip.clone();
    clip.y_thr = clip.y_thr.map(|t| t as f32 as f64);
    let header = Header {
        network: state.config.clone(),
        clip,
        act_range: state.act_range,
        meta: state.meta.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    let tensors = named_tensors(state);
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data("checkpoint text is not UTF-8"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::data("not an MSNN checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let text = r.string()?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    header.network.validate()?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }

    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks tensor {name}")))?;
        t.expect_shape(shape)
            .map_err(|_| Error::data(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())))?;
        Ok(t)
    };

    // Shapes come from a freshly built network of the stored configuration.
    let template = crate::model::build_network(&header.network, 0)?;
    let mut layers = Vec::with_capacity(LAYERS);
    let mut bns = Vec::with_capacity(LAYERS);
    for (l, lname) in LAYER_NAMES.iter().enumerate() {
        let tl = &template.layers[l];
        layers.push(LayerParams {
            weight: take(format!("{lname}.weight"), tl.weight.shape())?,
            bias: take(format!("{lname}.bias"), tl.bias.shape())?,
        });
        bns.push(match &template.bn[l] {
            Some(bn) => {
                let c = [bn.running_mean.len()];
                Some(BnParams {
                    gamma: take(format!("{lname}.bn.gamma"), &c)?,
                    beta: take(format!("{lname}.bn.beta"), &c)?,
                    running_mean: take(format!("{lname}.bn.running_mean"), &c)?.into_data(),
                    running_var: take(format!("{lname}.bn.running_var"), &c)?.into_data(),
                })
            }
            None => None,
        });
    }
    let thr = take("clip.y_thr".into(), &[CLIPPED_LAYERS])?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::data(format!("unexpected tensor {extra} in checkpoint")));
    }
    let mut clip = header.clip;
    clip.y_thr.copy_from_slice(thr.data());
    let layers: [LayerParams; LAYERS] = layers.try_into().map_err(|_| Error::data("layer count"))?;
    let bn: [Option<BnParams>; LAYERS] = bns.try_into().map_err(|_| Error::data("layer count"))?;
    Ok(NetworkState {
        config: header.network,
        layers,
        bn,
        clip,
        act_range: header.act_range,
        meta: header.meta,
    })
}

pub fn save(state: &NetworkState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Round every stored value through `f32`, the precision of the file format.
pub fn round_to_storage(state: &mut NetworkState) {
    for p in state.params_mut() {
        for v in p {
            *v = *v as f32 as f64;
        }
    }
    for bn in state.bn.iter_mut().flatten() {
        for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}
