//! safetensors import/export using torchvision `state_dict` tensor names.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::arch::Backbone;
use crate::error::WeightsError;
use crate::layers::Param;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WeightsError + '_ {
    move |source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes every tensor (parameters and batch-norm buffers) in a stable
/// name order; `metadata` lands in the safetensors header.
pub fn to_bytes(net: &mut Backbone, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    net.visit(&mut |name, p: &mut Param| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push((name.to_string(), p.shape.clone(), bytes));
    });
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, s, b)| {
            (
                n.clone(),
                TensorView::new(Dtype::F32, s.clone(), b).expect("shape matches byte length"),
            )
        })
        .collect();
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize(views, &Some(meta)).expect("in-memory serialization")
}

pub fn save(net: &mut Backbone, path: &Path, metadata: &BTreeMap<String, String>) -> Result<(), WeightsError> {
    std::fs::write(path, to_bytes(net, metadata)).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPolicy {
    /// Classifier tensors must be present with matching shapes.
    Require,
    /// Classifier tensors are ignored (feature extraction only).
    Ignore,
}

/// Loads tensors into `net` by name. Returns the file's metadata.
pub fn load(net: &mut Backbone, path: &Path, head: HeadPolicy) -> Result<BTreeMap<String, String>, WeightsError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(net, &bytes, head).map_err(|e| match e {
        WeightsError::Format { message, .. } => WeightsError::Format {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub fn from_bytes(net: &mut Backbone, bytes: &[u8], head: HeadPolicy) -> Result<BTreeMap<String, String>, WeightsError> {
    let format = |message: String| WeightsError::Format {
        path: "<memory>".into(),
        message,
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| format(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| format(e.to_string()))?;
    let mut missing = Vec::new();
    let mut first_err: Option<WeightsError> = None;
    let mut apply = |name: &str, p: &mut Param| {
        if first_err.is_some() {
            return;
        }
        match st.tensor(name) {
            Ok(view) => {
                if view.shape() != p.shape.as_slice() {
                    first_err = Some(WeightsError::Shape {
                        name: name.to_string(),
                        expected: p.shape.clone(),
                        found: view.shape().to_vec(),
                    });
                    return;
                }
                if view.dtype() != Dtype::F32 {
                    first_err = Some(format(format!("{name}: only f32 tensors are supported")));
                    return;
                }
                for (v, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
                    *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                }
            }
            Err(_) => missing.push(name.to_string()),
        }
    };
    match head {
        HeadPolicy::Require => net.visit(&mut apply),
        HeadPolicy::Ignore => net.visit_features(&mut apply),
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(WeightsError::Missing(missing));
    }
    Ok(header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Architecture;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_restores_every_tensor() {
        let mut a = Backbone::new(Architecture::Mnv3Small, 7, 1);
        let mut b = Backbone::new(Architecture::Mnv3Small, 7, 2);
        let meta = BTreeMap::from([("adaptation_tag".to_string(), "domain_adapted".to_string())]);
        let bytes = to_bytes(&mut a, &meta);
        let got = from_bytes(&mut b, &bytes, HeadPolicy::Require).unwrap();
        assert_eq!(got, meta);
        let x = Tensor::from_vec([1, 3, 32, 32], (0..3072).map(|i| (i % 17) as f32 / 17.0).collect());
        assert_eq!(a.embed(&x), b.embed(&x));
    }

    #[test]
    fn head_shape_mismatch_is_reported_unless_ignored() {
        let mut a = Backbone::new(Architecture::Mnv2, 28, 1);
        let mut b = Backbone::new(Architecture::Mnv2, 1000, 2);
        let bytes = to_bytes(&mut a, &BTreeMap::new());
        assert!(matches!(
            from_bytes(&mut b, &bytes, HeadPolicy::Require),
            Err(WeightsError::Shape { .. })
        ));
        from_bytes(&mut b, &bytes, HeadPolicy::Ignore).unwrap();
    }

    #[test]
    fn stripped_file_is_missing_head_tensors() {
        let mut a = Backbone::new(Architecture::Mnv2, 5, 1);
        a.strip_head();
        let bytes = to_bytes(&mut a, &BTreeMap::new());
        let mut b = Backbone::new(Architecture::Mnv2, 5, 2);
        match from_bytes(&mut b, &bytes, HeadPolicy::Require) {
            Err(WeightsError::Missing(names)) => assert!(names.iter().all(|n| n.starts_with("classifier"))),
            other => panic!("unexpected {other:?}"),
        }
        from_bytes(&mut b, &bytes, HeadPolicy::Ignore).unwrap();
    }
}
