//! Versioned text checkpoints.
//!
//! The container is line oriented and self-describing:
//!
//! ```text
//! dlcm-checkpoint v1
//! kind dlcm
//! meta n 20
//! meta alpha 10
//! meta beta 5
//! meta k 3
//! tensor gru.w_x 2 15 15
//! <225 space-separated decimal values>
//! ...
//! end
//! ```
//!
//! Values are written with the shortest decimal representation that parses
//! back to the identical f32, so a save/load round trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autograd::Tensor;
use crate::models::{
    DlcmParams, DnnParams, GruWeights, LidnnParams, LinearRanker, Mlp, ModelKind, ModelParams,
};

const MAGIC: &str = "dlcm-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
    #[error("checkpoint holds a non-finite value in tensor {0}")]
    NonFinite(String),
}

/// Serialize a model to the text container.
pub fn to_string(params: &ModelParams) -> Result<String, CheckpointError> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind {}", params.kind().name()).unwrap();
    for (key, value) in meta_of(params) {
        writeln!(out, "meta {key} {value}").unwrap();
    }
    for (name, tensor) in params.named_tensors() {
        if !tensor.is_finite() {
            return Err(CheckpointError::NonFinite(name));
        }
        write!(out, "tensor {name} {}", tensor.rank()).unwrap();
        for e in tensor.shape() {
            write!(out, " {e}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in tensor.data() {
            if !first {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
            first = false;
        }
        out.push('\n');
    }
    writeln!(out, "end").unwrap();
    Ok(out)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let text = to_string(params)?;
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn meta_of(params: &ModelParams) -> Vec<(&'static str, usize)> {
    match params {
        ModelParams::Linear(m) => vec![("alpha", m.alpha())],
        ModelParams::Dnn(m) => vec![("n", m.n), ("alpha", m.alpha)],
        ModelParams::Lidnn(m) => vec![("n", m.n), ("alpha", m.alpha)],
        ModelParams::Dlcm(m) => vec![
            ("n", m.n),
            ("alpha", m.alpha),
            ("beta", m.beta),
            ("k", m.k),
        ],
    }
}

struct Parsed {
    kind: ModelKind,
    meta: Vec<(String, usize)>,
    tensors: Vec<(String, Tensor)>,
}

fn parse(text: &str) -> Result<Parsed, CheckpointError> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| CheckpointError::Format { line: line + 1, msg };

    let (i, magic) = lines
        .next()
        .ok_or_else(|| err(0, "empty checkpoint".into()))?;
    if magic.trim_end() != MAGIC {
        return Err(err(i, format!("expected `{MAGIC}` header")));
    }
    let (i, kind_line) = lines.next().ok_or_else(|| err(1, "missing kind".into()))?;
    let kind_name = kind_line
        .strip_prefix("kind ")
        .ok_or_else(|| err(i, "expected `kind <model>`".into()))?;
    let kind = ModelKind::parse(kind_name.trim())
        .ok_or_else(|| err(i, format!("unknown model kind `{kind_name}`")))?;

    let mut meta = Vec::new();
    let mut tensors = Vec::new();
    let mut saw_end = false;
    while let Some((i, line)) = lines.next() {
        if line == "end" {
            saw_end = true;
            if let Some((j, extra)) = lines.next() {
                if !extra.trim().is_empty() {
                    return Err(err(j, "content after end marker".into()));
                }
            }
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let mut parts = rest.split_whitespace();
            let key = parts
                .next()
                .ok_or_else(|| err(i, "meta needs a key".into()))?;
            let value: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(i, format!("meta {key} needs an integer value")))?;
            if parts.next().is_some() {
                return Err(err(i, "trailing tokens on meta line".into()));
            }
            meta.push((key.to_string(), value));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| err(i, "tensor needs a name".into()))?
                .to_string();
            let rank: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(i, "tensor needs a rank".into()))?;
            let shape: Vec<usize> = parts
                .map(|p| {
                    p.parse()
                        .map_err(|_| err(i, format!("bad extent `{p}` for tensor {name}")))
                })
                .collect::<Result<_, _>>()?;
            if shape.len() != rank || shape.iter().any(|&e| e == 0) {
                return Err(err(i, format!("tensor {name}: rank/shape mismatch")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| err(i, format!("tensor {name}: shape overflows")))?;
            let (j, data_line) = lines
                .next()
                .ok_or_else(|| err(i, format!("tensor {name}: missing data line")))?;
            let data: Vec<f32> = data_line
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| err(j, format!("bad value `{t}` in tensor {name}")))
                })
                .collect::<Result<_, _>>()?;
            if data.len() != numel {
                return Err(err(
                    j,
                    format!(
                        "tensor {name}: expected {numel} values, found {}",
                        data.len()
                    ),
                ));
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| err(j, format!("tensor {name}: {e}")))?;
            if !tensor.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
            tensors.push((name, tensor));
        } else if line.trim().is_empty() {
            continue;
        } else {
            return Err(err(i, format!("unrecognized line `{line}`")));
        }
    }
    if !saw_end {
        return Err(CheckpointError::Inconsistent(
            "missing end marker (truncated file?)".into(),
        ));
    }
    Ok(Parsed {
        kind,
        meta,
        tensors,
    })
}

fn meta_value(parsed: &Parsed, key: &str) -> Result<usize, CheckpointError> {
    parsed
        .meta
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| CheckpointError::Inconsistent(format!("missing meta {key}")))
}

fn take_tensor(
    parsed: &mut Parsed,
    name: &str,
    shape: &[usize],
) -> Result<Tensor, CheckpointError> {
    if parsed.tensors.is_empty() {
        return Err(CheckpointError::Inconsistent(format!(
            "missing tensor {name}"
        )));
    }
    let (found, tensor) = parsed.tensors.remove(0);
    if found != name {
        return Err(CheckpointError::Inconsistent(format!(
            "expected tensor {name}, found {found}"
        )));
    }
    if tensor.shape() != shape {
        return Err(CheckpointError::Inconsistent(format!(
            "tensor {name}: expected shape {shape:?}, found {:?}",
            tensor.shape()
        )));
    }
    Ok(tensor)
}

/// Take consecutive layer{i}.w / layer{i}.b pairs and rebuild an MLP whose
/// dimensions chain from `input_dim` to `output_dim`.
fn take_mlp(
    parsed: &mut Parsed,
    input_dim: usize,
    output_dim: usize,
) -> Result<Mlp, CheckpointError> {
    let mut layers = Vec::new();
    let mut expect_in = input_dim;
    let mut index = 0usize;
    while !parsed.tensors.is_empty() {
        let name = parsed.tensors[0].0.clone();
        if !name.starts_with("layer") {
            break;
        }
        let w_shape_out = parsed.tensors[0].1.shape().to_vec();
        if w_shape_out.len() != 2 || w_shape_out[0] != expect_in {
            return Err(CheckpointError::Inconsistent(format!(
                "layer {index}: expected input width {expect_in}, found {w_shape_out:?}"
            )));
        }
        let out_dim = w_shape_out[1];
        let w = take_tensor(parsed, &format!("layer{index}.w"), &[expect_in, out_dim])?;
        let b = take_tensor(parsed, &format!("layer{index}.b"), &[out_dim])?;
        layers.push((w, b));
        expect_in = out_dim;
        index += 1;
    }
    if layers.is_empty() || expect_in != output_dim {
        return Err(CheckpointError::Inconsistent(format!(
            "mlp must end at width {output_dim}, ended at {expect_in}"
        )));
    }
    Ok(Mlp { layers })
}

/// Rebuild a model from checkpoint text.
pub fn from_str(text: &str) -> Result<ModelParams, CheckpointError> {
    let mut parsed = parse(text)?;
    let params = match parsed.kind {
        ModelKind::Linear => {
            let alpha = meta_value(&parsed, "alpha")?;
            let w = take_tensor(&mut parsed, "w", &[alpha])?;
            ModelParams::Linear(LinearRanker::new(w))
        }
        ModelKind::Dnn => {
            let n = meta_value(&parsed, "n")?;
            let alpha = meta_value(&parsed, "alpha")?;
            let mlp = take_mlp(&mut parsed, alpha, 1)?;
            ModelParams::Dnn(DnnParams { n, alpha, mlp })
        }
        ModelKind::Lidnn => {
            let n = meta_value(&parsed, "n")?;
            let alpha = meta_value(&parsed, "alpha")?;
            let mlp = take_mlp(&mut parsed, n * alpha, n)?;
            ModelParams::Lidnn(LidnnParams { n, alpha, mlp })
        }
        ModelKind::Dlcm => {
            let n = meta_value(&parsed, "n")?;
            let alpha = meta_value(&parsed, "alpha")?;
            let beta = meta_value(&parsed, "beta")?;
            let k = meta_value(&parsed, "k")?;
            let d = alpha + beta;
            let abstraction = if beta > 0 {
                Some(crate::models::Abstraction {
                    w0: take_tensor(&mut parsed, "abstraction.w0", &[alpha, beta])?,
                    b0: take_tensor(&mut parsed, "abstraction.b0", &[beta])?,
                    w1: take_tensor(&mut parsed, "abstraction.w1", &[beta, beta])?,
                    b1: take_tensor(&mut parsed, "abstraction.b1", &[beta])?,
                })
            } else {
                None
            };
            let gru = GruWeights {
                w_x: take_tensor(&mut parsed, "gru.w_x", &[d, d])?,
                w_s: take_tensor(&mut parsed, "gru.w_s", &[d, d])?,
                w_ux: take_tensor(&mut parsed, "gru.w_ux", &[d, d])?,
                w_us: take_tensor(&mut parsed, "gru.w_us", &[d, d])?,
                w_rx: take_tensor(&mut parsed, "gru.w_rx", &[d, d])?,
                w_rs: take_tensor(&mut parsed, "gru.w_rs", &[d, d])?,
            };
            let w_phi = take_tensor(&mut parsed, "phi.w", &[d * k, d])?;
            let b_phi = take_tensor(&mut parsed, "phi.b", &[d * k, 1])?;
            let v_phi = take_tensor(&mut parsed, "phi.v", &[k, 1])?;
            ModelParams::Dlcm(DlcmParams {
                n,
                alpha,
                beta,
                k,
                abstraction,
                gru,
                w_phi,
                b_phi,
                v_phi,
            })
        }
    };
    if !parsed.tensors.is_empty() {
        return Err(CheckpointError::Inconsistent(format!(
            "unexpected trailing tensor {}",
            parsed.tensors[0].0
        )));
    }
    Ok(params)
}

pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_bit_identical(a: &ModelParams, b: &ModelParams) {
        let at = a.named_tensors();
        let bt = b.named_tensors();
        assert_eq!(at.len(), bt.len());
        for ((an, av), (bn, bv)) in at.iter().zip(bt.iter()) {
            assert_eq!(an, bn);
            assert_eq!(av.shape(), bv.shape());
            for (x, y) in av.data().iter().zip(bv.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {an}");
            }
        }
    }

    #[test]
    fn roundtrip_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let models = vec![
            ModelParams::Linear(LinearRanker::new(Tensor::vector(vec![
                0.1, -2.5e-7, 3.0,
            ]))),
            ModelParams::Dnn(DnnParams::init(4, 3, &[8, 8], &mut rng)),
            ModelParams::Lidnn(LidnnParams::init(4, 3, &[16], &mut rng)),
            ModelParams::Dlcm(DlcmParams::init(5, 3, 2, 2, &mut rng)),
            ModelParams::Dlcm(DlcmParams::init(5, 3, 0, 1, &mut rng)),
        ];
        for m in models {
            let text = to_string(&m).unwrap();
            let back = from_str(&text).unwrap();
            assert_eq!(back.kind(), m.kind());
            assert_eq!(back.list_size(), m.list_size());
            assert_bit_identical(&m, &back);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let m = ModelParams::Dnn(DnnParams::init(4, 3, &[8], &mut rng));
        let text = to_string(&m).unwrap();
        let cut = &text[..text.len() - 5];
        assert!(from_str(cut).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(matches!(
            from_str("something else\nkind dnn\nend\n"),
            Err(CheckpointError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = ModelParams::Linear(LinearRanker::new(Tensor::vector(vec![1.0, 2.0])));
        let text = to_string(&m).unwrap();
        let tampered = text.replace("meta alpha 2", "meta alpha 3");
        assert!(matches!(
            from_str(&tampered),
            Err(CheckpointError::Inconsistent(_))
        ));
    }

    #[test]
    fn non_finite_values_are_rejected_on_save() {
        let m = ModelParams::Linear(LinearRanker::new(Tensor::vector(vec![f32::NAN])));
        assert!(matches!(to_string(&m), Err(CheckpointError::NonFinite(_))));
    }
}
