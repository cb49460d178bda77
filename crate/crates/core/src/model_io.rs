//! File formats: model manifests with raw tensor blobs, calibration sets,
//! quantization-parameter tables, assignments and training state.
//!
//! Everything textual is JSON with a fixed field order; every float is
//! encoded as its raw bit pattern (`0x3F800000` style) so files round-trip
//! bit-exactly and reruns diff clean. Tensor blobs are headerless
//! little-endian f32, row-major; shapes live in the manifest. The
//! calibration index is a two-column CSV (`blob,label`) read in file order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibrate::{CalibratorKind, LayerQParams, QParamsTable};
use crate::dqss::{Assignment, LayerTheta, ThetaState, ThetaTraceRow};
use crate::error::ModelIoError;
use crate::graph::{Graph, Layer, LayerKind};
use crate::qat::{QatLayerState, QatState, QatStrategy};
use crate::quantizer::QuantParams;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// f32 carried as its exact bit pattern in text files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexF32(pub f32);

impl Serialize for HexF32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{:08X}", self.0.to_bits()))
    }
}

impl<'de> Deserialize<'de> for HexF32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let hex = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .ok_or_else(|| serde::de::Error::custom(format!("expected 0x-prefixed bits, got `{s}`")))?;
        let bits = u32::from_str_radix(hex, 16)
            .map_err(|e| serde::de::Error::custom(format!("bad float bits `{s}`: {e}")))?;
        Ok(HexF32(f32::from_bits(bits)))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ModelIoError {
    ModelIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, detail: impl std::fmt::Display) -> ModelIoError {
    ModelIoError::Parse {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

fn check_version(path: &Path, found: u32) -> Result<(), ModelIoError> {
    if found != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            path: path.display().to_string(),
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tensor blobs

/// Read a headerless little-endian f32 blob, checking the exact byte length.
pub fn read_blob(path: &Path, shape: &[usize]) -> Result<Vec<f32>, ModelIoError> {
    let expected = 4u64 * shape.iter().product::<usize>() as u64;
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ModelIoError::MissingBlob {
                manifest: String::new(),
                blob: path.display().to_string(),
            }
        } else {
            io_err(path, e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(ModelIoError::BlobLengthMismatch {
            blob: path.display().to_string(),
            found: bytes.len() as u64,
            expected,
            shape: shape.to_vec(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_blob(path: &Path, data: &[f32]) -> Result<(), ModelIoError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Model manifest

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<HexF32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<ManifestParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<ManifestLayer>,
}

fn manifest_param(layer: &str, pname: &str, t: &Tensor) -> ManifestParam {
    ManifestParam {
        name: pname.to_string(),
        shape: t.shape().to_vec(),
        blob: format!("{layer}.{pname}.bin"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ModelIoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ModelIoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

/// Save a graph as `model.json` plus one blob per parameter tensor.
pub fn save_model(graph: &Graph, dir: &Path) -> Result<PathBuf, ModelIoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut layers = Vec::new();
    for layer in &graph.layers {
        let mut ml = ManifestLayer {
            name: layer.name.clone(),
            kind: layer.kind.kind_name().to_string(),
            stride: None,
            padding: None,
            kernel: None,
            eps: None,
            params: Vec::new(),
        };
        match &layer.kind {
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                ml.stride = Some(*stride);
                ml.padding = Some(*padding);
                ml.params.push(manifest_param(&layer.name, "weight", weight));
                if let Some(b) = bias {
                    ml.params.push(manifest_param(&layer.name, "bias", b));
                }
            }
            LayerKind::Linear { weight, bias } => {
                ml.params.push(manifest_param(&layer.name, "weight", weight));
                if let Some(b) = bias {
                    ml.params.push(manifest_param(&layer.name, "bias", b));
                }
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                ml.eps = Some(HexF32(*eps));
                ml.params.push(manifest_param(&layer.name, "gamma", gamma));
                ml.params.push(manifest_param(&layer.name, "beta", beta));
                ml.params.push(manifest_param(&layer.name, "mean", mean));
                ml.params.push(manifest_param(&layer.name, "var", var));
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                ml.kernel = Some(*kernel);
                ml.stride = Some(*stride);
            }
            LayerKind::Relu | LayerKind::Flatten => {}
        }
        for p in &ml.params {
            let tensor = param_tensor(&layer.kind, &p.name).expect("listed params exist");
            write_blob(&dir.join(&p.blob), tensor.data())?;
        }
        layers.push(ml);
    }
    let manifest = ManifestFile {
        format_version: FORMAT_VERSION,
        input_shape: graph.input_shape.clone(),
        layers,
    };
    let path = dir.join("model.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

fn param_tensor<'a>(kind: &'a LayerKind, name: &str) -> Option<&'a Tensor> {
    match (kind, name) {
        (LayerKind::Conv2d { weight, .. }, "weight") => Some(weight),
        (LayerKind::Conv2d { bias, .. }, "bias") => bias.as_ref(),
        (LayerKind::Linear { weight, .. }, "weight") => Some(weight),
        (LayerKind::Linear { bias, .. }, "bias") => bias.as_ref(),
        (LayerKind::BatchNorm { gamma, .. }, "gamma") => Some(gamma),
        (LayerKind::BatchNorm { beta, .. }, "beta") => Some(beta),
        (LayerKind::BatchNorm { mean, .. }, "mean") => Some(mean),
        (LayerKind::BatchNorm { var, .. }, "var") => Some(var),
        _ => None,
    }
}

/// Load a model from its manifest; every referenced blob must exist with
/// the exact byte length its shape implies.
pub fn load_model(manifest_path: &Path) -> Result<Graph, ModelIoError> {
    let manifest: ManifestFile = read_json(manifest_path)?;
    check_version(manifest_path, manifest.format_version)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest_name = manifest_path.display().to_string();

    let mut seen = std::collections::HashSet::new();
    let mut layers = Vec::new();
    for ml in &manifest.layers {
        if !seen.insert(ml.name.clone()) {
            return Err(ModelIoError::DuplicateLayer {
                path: manifest_name.clone(),
                layer: ml.name.clone(),
            });
        }
        let load_param = |pname: &str| -> Result<Option<Tensor>, ModelIoError> {
            let Some(p) = ml.params.iter().find(|p| p.name == pname) else {
                return Ok(None);
            };
            let blob_path = dir.join(&p.blob);
            let data = read_blob(&blob_path, &p.shape).map_err(|e| match e {
                ModelIoError::MissingBlob { blob, .. } => ModelIoError::MissingBlob {
                    manifest: manifest_name.clone(),
                    blob,
                },
                other => other,
            })?;
            Ok(Some(Tensor::new(p.shape.clone(), data)?))
        };

        let kind = match ml.kind.as_str() {
            "conv2d" => {
                let weight = load_param("weight")?.ok_or_else(|| {
                    parse_err(manifest_path, format!("layer `{}` lacks a weight", ml.name))
                })?;
                LayerKind::Conv2d {
                    weight,
                    bias: load_param("bias")?,
                    stride: ml.stride.unwrap_or(1),
                    padding: ml.padding.unwrap_or(0),
                }
            }
            "linear" => {
                let weight = load_param("weight")?.ok_or_else(|| {
                    parse_err(manifest_path, format!("layer `{}` lacks a weight", ml.name))
                })?;
                LayerKind::Linear {
                    weight,
                    bias: load_param("bias")?,
                }
            }
            "batchnorm" => {
                let missing = |what: &str| {
                    parse_err(
                        manifest_path,
                        format!("batchnorm `{}` lacks `{what}`", ml.name),
                    )
                };
                LayerKind::BatchNorm {
                    gamma: load_param("gamma")?.ok_or_else(|| missing("gamma"))?,
                    beta: load_param("beta")?.ok_or_else(|| missing("beta"))?,
                    mean: load_param("mean")?.ok_or_else(|| missing("mean"))?,
                    var: load_param("var")?.ok_or_else(|| missing("var"))?,
                    eps: ml.eps.map_or(1e-5, |h| h.0),
                }
            }
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool {
                kernel: ml.kernel.unwrap_or(2),
                stride: ml.stride.unwrap_or(2),
            },
            "avgpool" => LayerKind::AvgPool {
                kernel: ml.kernel.unwrap_or(2),
                stride: ml.stride.unwrap_or(2),
            },
            "flatten" => LayerKind::Flatten,
            other => {
                return Err(ModelIoError::UnknownLayerKind {
                    path: manifest_name,
                    kind: other.to_string(),
                })
            }
        };
        layers.push(Layer {
            name: ml.name.clone(),
            kind,
        });
    }
    let graph = Graph::new(manifest.input_shape, layers);
    graph.validate()?;
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Calibration sets

/// Labeled tensor samples sharing one declared input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub items: Vec<(Tensor, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibMeta {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
}

/// Write a calibration set as meta.json + index.csv + one blob per sample.
pub fn save_calibration(set: &CalibrationSet, dir: &Path) -> Result<(), ModelIoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(
        &dir.join("meta.json"),
        &CalibMeta {
            format_version: FORMAT_VERSION,
            input_shape: set.input_shape.clone(),
            num_classes: set.num_classes,
        },
    )?;
    let mut index = String::from("blob,label\n");
    for (i, (t, label)) in set.items.iter().enumerate() {
        let blob = format!("sample_{i:05}.bin");
        write_blob(&dir.join(&blob), t.data())?;
        index.push_str(&format!("{blob},{label}\n"));
    }
    fs::write(dir.join("index.csv"), index).map_err(|e| io_err(&dir.join("index.csv"), e))
}

/// Load the first `limit` entries of a calibration directory in index
/// order; a limit beyond the available entries loads everything.
pub fn load_calibration(dir: &Path, limit: usize) -> Result<CalibrationSet, ModelIoError> {
    let meta: CalibMeta = read_json(&dir.join("meta.json"))?;
    check_version(&dir.join("meta.json"), meta.format_version)?;
    let index_path = dir.join("index.csv");
    let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;

    let mut items = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 {
            if line.trim() != "blob,label" {
                return Err(ModelIoError::MalformedIndexRow {
                    path: index_path.display().to_string(),
                    row: 1,
                    detail: format!("expected header `blob,label`, got `{line}`"),
                });
            }
            continue;
        }
        if items.len() >= limit {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row = line_no + 1;
        let mut parts = line.splitn(2, ',');
        let blob = parts.next().unwrap_or("").trim();
        let label_str = parts.next().ok_or_else(|| ModelIoError::MalformedIndexRow {
            path: index_path.display().to_string(),
            row,
            detail: "missing label column".into(),
        })?;
        let label: i64 = label_str
            .trim()
            .parse()
            .map_err(|e| ModelIoError::MalformedIndexRow {
                path: index_path.display().to_string(),
                row,
                detail: format!("bad label `{label_str}`: {e}"),
            })?;
        if label < 0 || label as usize >= meta.num_classes {
            return Err(ModelIoError::LabelOutOfRange {
                label,
                num_classes: meta.num_classes,
                row,
            });
        }
        let data = read_blob(&dir.join(blob), &meta.input_shape).map_err(|e| match e {
            ModelIoError::BlobLengthMismatch { blob, found, expected, .. } => {
                ModelIoError::InputShapeMismatch {
                    blob,
                    found: vec![(found / 4) as usize],
                    declared: vec![(expected / 4) as usize],
                }
            }
            other => other,
        })?;
        items.push((
            Tensor::new(meta.input_shape.clone(), data)?,
            label as usize,
        ));
    }
    Ok(CalibrationSet {
        input_shape: meta.input_shape,
        num_classes: meta.num_classes,
        items,
    })
}

// ---------------------------------------------------------------------------
// Quantization parameter tables

#[derive(Debug, Serialize, Deserialize)]
struct QuantParamsFile {
    strategy: String,
    threshold: HexF32,
    scale: HexF32,
    zero_point: i32,
    qmin: i32,
    qmax: i32,
    bits: u8,
    degenerate: bool,
}

impl QuantParamsFile {
    fn pack(kind: CalibratorKind, p: &QuantParams) -> Self {
        QuantParamsFile {
            strategy: kind.as_str().to_string(),
            threshold: HexF32(p.threshold),
            scale: HexF32(p.scale),
            zero_point: p.zero_point,
            qmin: p.qmin,
            qmax: p.qmax,
            bits: p.bits,
            degenerate: p.degenerate,
        }
    }

    fn unpack(&self, path: &Path) -> Result<(CalibratorKind, QuantParams), ModelIoError> {
        let kind =
            self.strategy
                .parse::<CalibratorKind>()
                .map_err(|_| ModelIoError::UnknownStrategy {
                    path: path.display().to_string(),
                    name: self.strategy.clone(),
                })?;
        Ok((
            kind,
            QuantParams {
                threshold: self.threshold.0,
                scale: self.scale.0,
                zero_point: self.zero_point,
                qmin: self.qmin,
                qmax: self.qmax,
                bits: self.bits,
                degenerate: self.degenerate,
            },
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QParamsLayerFile {
    layer: String,
    act: Vec<QuantParamsFile>,
    weight: Vec<QuantParamsFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QParamsFileRoot {
    format_version: u32,
    bits: u8,
    pool: Vec<String>,
    layers: Vec<QParamsLayerFile>,
}

pub fn save_qparams(table: &QParamsTable, path: &Path) -> Result<(), ModelIoError> {
    let root = QParamsFileRoot {
        format_version: FORMAT_VERSION,
        bits: table.bits,
        pool: table.pool.iter().map(|k| k.as_str().to_string()).collect(),
        layers: table
            .layers
            .iter()
            .map(|l| QParamsLayerFile {
                layer: l.layer.clone(),
                act: l.act.iter().map(|(k, p)| QuantParamsFile::pack(*k, p)).collect(),
                weight: l
                    .weight
                    .iter()
                    .map(|(k, p)| QuantParamsFile::pack(*k, p))
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &root)
}

pub fn load_qparams(path: &Path) -> Result<QParamsTable, ModelIoError> {
    let root: QParamsFileRoot = read_json(path)?;
    check_version(path, root.format_version)?;
    let mut pool = Vec::new();
    for name in &root.pool {
        pool.push(
            name.parse::<CalibratorKind>()
                .map_err(|_| ModelIoError::UnknownStrategy {
                    path: path.display().to_string(),
                    name: name.clone(),
                })?,
        );
    }
    let mut seen = std::collections::HashSet::new();
    let mut layers = Vec::new();
    for l in &root.layers {
        if !seen.insert(l.layer.clone()) {
            return Err(ModelIoError::DuplicateLayer {
                path: path.display().to_string(),
                layer: l.layer.clone(),
            });
        }
        let act = l
            .act
            .iter()
            .map(|p| p.unpack(path))
            .collect::<Result<Vec<_>, _>>()?;
        let weight = l
            .weight
            .iter()
            .map(|p| p.unpack(path))
            .collect::<Result<Vec<_>, _>>()?;
        layers.push(LayerQParams {
            layer: l.layer.clone(),
            act,
            weight,
        });
    }
    Ok(QParamsTable {
        bits: root.bits,
        pool,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Assignments

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentLayerFile {
    layer: String,
    act: String,
    weight: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentFileRoot {
    format_version: u32,
    layers: Vec<AssignmentLayerFile>,
}

pub fn save_assignment(assignment: &Assignment, path: &Path) -> Result<(), ModelIoError> {
    let root = AssignmentFileRoot {
        format_version: FORMAT_VERSION,
        layers: assignment
            .layers
            .iter()
            .map(|(layer, a, w)| AssignmentLayerFile {
                layer: layer.clone(),
                act: a.as_str().to_string(),
                weight: w.as_str().to_string(),
            })
            .collect(),
    };
    write_json(path, &root)
}

pub fn load_assignment(path: &Path) -> Result<Assignment, ModelIoError> {
    let root: AssignmentFileRoot = read_json(path)?;
    check_version(path, root.format_version)?;
    let mut seen = std::collections::HashSet::new();
    let mut layers = Vec::new();
    for l in &root.layers {
        if !seen.insert(l.layer.clone()) {
            return Err(ModelIoError::DuplicateLayer {
                path: path.display().to_string(),
                layer: l.layer.clone(),
            });
        }
        let parse = |name: &str| {
            name.parse::<CalibratorKind>()
                .map_err(|_| ModelIoError::UnknownStrategy {
                    path: path.display().to_string(),
                    name: name.to_string(),
                })
        };
        layers.push((l.layer.clone(), parse(&l.act)?, parse(&l.weight)?));
    }
    Ok(Assignment { layers })
}

// ---------------------------------------------------------------------------
// QAT training state

#[derive(Debug, Serialize, Deserialize)]
struct ThetaLayerFile {
    layer: String,
    raw_alpha: Vec<HexF32>,
    raw_beta: Vec<HexF32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QatLayerFile {
    layer: String,
    pact_alpha_act: HexF32,
    pact_alpha_weight: HexF32,
    lsq_step_act: HexF32,
    lsq_step_weight: HexF32,
    ema_act_max: HexF32,
}

#[derive(Debug, Serialize, Deserialize)]
struct QatStateFile {
    format_version: u32,
    bits: u8,
    pool: Vec<String>,
    epochs_done: usize,
    warmed_up: bool,
    theta: Vec<ThetaLayerFile>,
    layers: Vec<QatLayerFile>,
}

pub fn save_qat_state(state: &QatState, path: &Path) -> Result<(), ModelIoError> {
    let root = QatStateFile {
        format_version: FORMAT_VERSION,
        bits: state.bits,
        pool: state.pool.iter().map(|s| s.as_str().to_string()).collect(),
        epochs_done: state.epochs_done,
        warmed_up: state.warmed_up,
        theta: state
            .theta
            .layers
            .iter()
            .map(|lt| ThetaLayerFile {
                layer: lt.layer.clone(),
                raw_alpha: lt.raw_alpha.iter().map(|&v| HexF32(v)).collect(),
                raw_beta: lt.raw_beta.iter().map(|&v| HexF32(v)).collect(),
            })
            .collect(),
        layers: state
            .layers
            .iter()
            .map(|l| QatLayerFile {
                layer: l.layer.clone(),
                pact_alpha_act: HexF32(l.pact_alpha_act),
                pact_alpha_weight: HexF32(l.pact_alpha_weight),
                lsq_step_act: HexF32(l.lsq_step_act),
                lsq_step_weight: HexF32(l.lsq_step_weight),
                ema_act_max: HexF32(l.ema_act_max),
            })
            .collect(),
    };
    write_json(path, &root)
}

pub fn load_qat_state(path: &Path, graph: &Graph) -> Result<QatState, ModelIoError> {
    let root: QatStateFile = read_json(path)?;
    check_version(path, root.format_version)?;
    let mut pool = Vec::new();
    for name in &root.pool {
        pool.push(
            name.parse::<QatStrategy>()
                .map_err(|_| ModelIoError::UnknownStrategy {
                    path: path.display().to_string(),
                    name: name.clone(),
                })?,
        );
    }
    let mut theta_layers = Vec::new();
    for t in &root.theta {
        let (idx, _) = graph.layer_by_name(&t.layer).ok_or_else(|| {
            parse_err(path, format!("theta references unknown layer `{}`", t.layer))
        })?;
        theta_layers.push(LayerTheta {
            layer: t.layer.clone(),
            layer_idx: idx,
            raw_alpha: t.raw_alpha.iter().map(|h| h.0).collect(),
            raw_beta: t.raw_beta.iter().map(|h| h.0).collect(),
        });
    }
    Ok(QatState {
        bits: root.bits,
        pool,
        theta: ThetaState {
            layers: theta_layers,
        },
        layers: root
            .layers
            .iter()
            .map(|l| QatLayerState {
                layer: l.layer.clone(),
                pact_alpha_act: l.pact_alpha_act.0,
                pact_alpha_weight: l.pact_alpha_weight.0,
                lsq_step_act: l.lsq_step_act.0,
                lsq_step_weight: l.lsq_step_weight.0,
                ema_act_max: l.ema_act_max.0,
            })
            .collect(),
        epochs_done: root.epochs_done,
        warmed_up: root.warmed_up,
    })
}

// ---------------------------------------------------------------------------
// CSV reports

/// Theta trace rows as CSV: epoch,layer,tensor_class,strategy,theta.
pub fn theta_trace_csv(rows: &[ThetaTraceRow]) -> String {
    let mut out = String::from("epoch,layer,tensor_class,strategy,theta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.layer,
            r.class.as_str(),
            r.strategy,
            r.theta
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use tempfile::tempdir;

    #[test]
    fn model_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let g = synth::toy_cnn(3, 8, 8, 4, 5);
        let manifest = save_model(&g, dir.path()).unwrap();
        let loaded = load_model(&manifest).unwrap();
        assert_eq!(g, loaded);

        let dir2 = tempdir().unwrap();
        let manifest2 = save_model(&loaded, dir2.path()).unwrap();
        let a = std::fs::read(&manifest).unwrap();
        let b = std::fs::read(&manifest2).unwrap();
        assert_eq!(a, b);
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(dir.path().join(&name)).unwrap();
            let y = std::fs::read(dir2.path().join(&name)).unwrap();
            assert_eq!(x, y, "blob {name:?} differs");
        }
    }

    #[test]
    fn missing_blob_is_reported_by_name() {
        let dir = tempdir().unwrap();
        let g = synth::toy_cnn(1, 4, 4, 2, 0);
        let manifest = save_model(&g, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("conv1.weight.bin")).unwrap();
        let err = load_model(&manifest).unwrap_err();
        match err {
            ModelIoError::MissingBlob { blob, .. } => assert!(blob.contains("conv1.weight.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_byte_is_length_mismatch() {
        let dir = tempdir().unwrap();
        let g = synth::toy_cnn(1, 4, 4, 2, 0);
        let manifest = save_model(&g, dir.path()).unwrap();
        let blob = dir.path().join("conv1.weight.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes.push(0);
        std::fs::write(&blob, bytes).unwrap();
        let err = load_model(&manifest).unwrap_err();
        assert!(matches!(err, ModelIoError::BlobLengthMismatch { .. }));
    }

    #[test]
    fn unknown_layer_kind_is_distinct_error() {
        let dir = tempdir().unwrap();
        let g = synth::toy_cnn(1, 4, 4, 2, 0);
        let manifest = save_model(&g, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"relu\"", "\"gelu\"");
        std::fs::write(&manifest, text).unwrap();
        let err = load_model(&manifest).unwrap_err();
        assert!(matches!(err, ModelIoError::UnknownLayerKind { kind, .. } if kind == "gelu"));
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let dir = tempdir().unwrap();
        let g = synth::toy_cnn(1, 4, 4, 2, 0);
        let manifest = save_model(&g, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&manifest, text).unwrap();
        let err = load_model(&manifest).unwrap_err();
        assert!(matches!(err, ModelIoError::UnsupportedVersion { found: 9, .. }));
    }

    #[test]
    fn calibration_limits_clamp() {
        let dir = tempdir().unwrap();
        let set = synth::pattern_dataset(&synth::PatternSpec::tiny(), 10);
        save_calibration(&set, dir.path()).unwrap();
        assert_eq!(load_calibration(dir.path(), 0).unwrap().items.len(), 0);
        assert_eq!(load_calibration(dir.path(), 4).unwrap().items.len(), 4);
        assert_eq!(load_calibration(dir.path(), 999).unwrap().items.len(), 10);
    }

    #[test]
    fn malformed_index_row_reports_row_number() {
        let dir = tempdir().unwrap();
        let set = synth::pattern_dataset(&synth::PatternSpec::tiny(), 3);
        save_calibration(&set, dir.path()).unwrap();
        let index = dir.path().join("index.csv");
        let mut text = std::fs::read_to_string(&index).unwrap();
        text.push_str("no_label_here\n");
        std::fs::write(&index, text).unwrap();
        let err = load_calibration(dir.path(), 99).unwrap_err();
        match err {
            ModelIoError::MalformedIndexRow { row, .. } => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn qparams_round_trip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qparams.json");
        let p = QuantParams::symmetric(0.1f32.next_up(), 8).unwrap();
        let table = QParamsTable {
            bits: 8,
            pool: vec![CalibratorKind::MaxAbs],
            layers: vec![LayerQParams {
                layer: "conv1".into(),
                act: vec![(CalibratorKind::MaxAbs, p)],
                weight: vec![(CalibratorKind::MaxAbs, p)],
            }],
        };
        save_qparams(&table, &path).unwrap();
        let loaded = load_qparams(&path).unwrap();
        let q = loaded.layers[0].act[0].1;
        assert_eq!(q.scale.to_bits(), p.scale.to_bits());
        assert_eq!(q.threshold.to_bits(), p.threshold.to_bits());
    }

    #[test]
    fn empty_qparams_file_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qparams.json");
        let table = QParamsTable {
            bits: 8,
            pool: vec![],
            layers: vec![],
        };
        save_qparams(&table, &path).unwrap();
        let loaded = load_qparams(&path).unwrap();
        assert!(loaded.layers.is_empty());
    }

    #[test]
    fn duplicate_layer_key_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qparams.json");
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        let layer = LayerQParams {
            layer: "conv1".into(),
            act: vec![(CalibratorKind::MaxAbs, p)],
            weight: vec![(CalibratorKind::MaxAbs, p)],
        };
        let table = QParamsTable {
            bits: 8,
            pool: vec![CalibratorKind::MaxAbs],
            layers: vec![layer.clone(), layer],
        };
        save_qparams(&table, &path).unwrap();
        let err = load_qparams(&path).unwrap_err();
        assert!(matches!(err, ModelIoError::DuplicateLayer { layer, .. } if layer == "conv1"));
    }

    #[test]
    fn unknown_strategy_on_load_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assignment.json");
        let text = r#"{
  "format_version": 1,
  "layers": [ { "layer": "conv1", "act": "sorcery", "weight": "maxabs" } ]
}"#;
        std::fs::write(&path, text).unwrap();
        let err = load_assignment(&path).unwrap_err();
        assert!(matches!(err, ModelIoError::UnknownStrategy { name, .. } if name == "sorcery"));
    }
}
