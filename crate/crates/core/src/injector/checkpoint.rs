//! Injector checkpoints: a JSON document of named row-major tensors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AttentionWeights, InjectorParams, LoraPair};
use crate::dataset::json_error;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    downsample: usize,
    format_version: u32,
    gate_gamma: f64,
    lora_alpha: f64,
    tensors: BTreeMap<String, NamedTensor>,
}

fn matrix_entry(m: &DMatrix<f64>) -> NamedTensor {
    NamedTensor {
        data: m.transpose().as_slice().to_vec(),
        shape: vec![m.nrows(), m.ncols()],
    }
}

/// Canonical text; keys are sorted, numbers round-trip exactly.
pub fn write_checkpoint(params: &InjectorParams) -> String {
    let mut tensors = BTreeMap::new();
    tensors.insert("pose_linear.weight".to_string(), matrix_entry(&params.pose_weight));
    tensors.insert(
        "pose_linear.bias".to_string(),
        NamedTensor {
            data: params.pose_bias.as_slice().to_vec(),
            shape: vec![params.pose_bias.len()],
        },
    );
    for (n, m) in [
        ("wq", &params.attn.wq),
        ("wk", &params.attn.wk),
        ("wv", &params.attn.wv),
        ("wo", &params.attn.wo),
    ] {
        tensors.insert(format!("attn.{n}"), matrix_entry(m));
    }
    for (name, pair) in &params.lora {
        tensors.insert(format!("lora.{name}.a"), matrix_entry(&pair.a));
        tensors.insert(format!("lora.{name}.b"), matrix_entry(&pair.b));
    }
    let doc = CheckpointDoc {
        downsample: params.downsample,
        format_version: CHECKPOINT_FORMAT_VERSION,
        gate_gamma: params.gate_gamma,
        lora_alpha: params.lora_alpha,
        tensors,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint always serializes");
    s.push('\n');
    s
}

fn take_matrix(tensors: &mut BTreeMap<String, NamedTensor>, name: &str) -> Result<DMatrix<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::validation("checkpoint", format!("missing tensor {name}")))?;
    if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
        return Err(Error::shape(
            "checkpoint",
            format!("{name}: shape {:?} with {} values", t.shape, t.data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.data))
}

/// Parses and validates a checkpoint.
pub fn read_checkpoint(text: &str) -> Result<InjectorParams> {
    let mut doc: CheckpointDoc = serde_json::from_str(text).map_err(json_error)?;
    if doc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::validation(
            "format_version",
            format!("unsupported version {}", doc.format_version),
        ));
    }
    let t = &mut doc.tensors;
    let pose_weight = take_matrix(t, "pose_linear.weight")?;
    let bias = t
        .remove("pose_linear.bias")
        .ok_or_else(|| Error::validation("checkpoint", "missing tensor pose_linear.bias"))?;
    if bias.shape != [bias.data.len()] {
        return Err(Error::shape("checkpoint", "pose_linear.bias must be a vector"));
    }
    let attn = AttentionWeights {
        wq: take_matrix(t, "attn.wq")?,
        wk: take_matrix(t, "attn.wk")?,
        wv: take_matrix(t, "attn.wv")?,
        wo: take_matrix(t, "attn.wo")?,
    };
    let names: Vec<String> = t
        .keys()
        .filter_map(|k| {
            k.strip_prefix("lora.")
                .and_then(|k| k.strip_suffix(".a"))
                .map(String::from)
        })
        .collect();
    let mut lora = BTreeMap::new();
    for name in names {
        let a = take_matrix(t, &format!("lora.{name}.a"))?;
        let b = take_matrix(t, &format!("lora.{name}.b"))?;
        lora.insert(name, LoraPair { a, b });
    }
    if let Some(extra) = t.keys().next() {
        return Err(Error::validation("checkpoint", format!("unexpected tensor {extra}")));
    }
    let params = InjectorParams {
        pose_weight,
        pose_bias: DVector::from_vec(bias.data),
        attn,
        gate_gamma: doc.gate_gamma,
        lora,
        lora_alpha: doc.lora_alpha,
        downsample: doc.downsample,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injector::{DitBlockWeights, ToyBatch, EMBED_DIM};

    #[test]
    fn round_trip() {
        let (_, params) = ToyBatch::random(2, 4, 2, EMBED_DIM, 3);
        let text = write_checkpoint(&params);
        let back = read_checkpoint(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(write_checkpoint(&back), text);
    }

    #[test]
    fn rejects_bad_documents() {
        let p = InjectorParams::from_base(&DitBlockWeights::random(EMBED_DIM, 16, 0), 0);
        let text = write_checkpoint(&p);
        assert!(matches!(
            read_checkpoint(&text[..text.len() - 3]),
            Err(Error::Parse { .. })
        ));
        let renamed = text.replace("\"attn.wq\"", "\"attn.wz\"");
        assert!(matches!(read_checkpoint(&renamed), Err(Error::Validation { .. })));
    }
}
