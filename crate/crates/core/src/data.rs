//! Dataset ingestion (IDX), synthetic data, model serialization, and report
//! emission.
//!
//! Pixels decode to `byte / 255` so inputs live in [0, 1]; per-channel
//! normalization happens inside the network (a Normalize layer built from
//! the train split's statistics), keeping the interpolation stage on the
//! raw pixel domain.
//!
//! Models are stored as one JSON manifest line (schema-versioned layer
//! descriptors) followed by a little-endian f32 blob of every numeric layer
//! constant in manifest order, integrity-checked by a SHA-256 digest.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::DatasetReport;
use crate::error::{GeoCertError, Result};
use crate::interval::Scalar;
use crate::network::{Layer, Network};
use crate::tensor::{conv_out_dims, Tensor};
use crate::train::TrainLog;

/// A labeled image set with the per-channel statistics of its pixels.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    /// `[n, channels, h, w]`, every entry in [0, 1].
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Per-channel (mean, std) over all images.
    pub channel_stats: Vec<(T, T)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` images (statistics recomputed on the subset).
    pub fn head(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.len());
        let plane: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let images = Tensor::from_vec(shape, self.images.as_slice()[..n * plane].to_vec());
        let channel_stats = channel_stats(&images);
        Dataset { images, labels: self.labels[..n].to_vec(), channel_stats }
    }
}

/// Per-channel mean and population standard deviation, accumulated in f64
/// in a fixed order so recomputation is bit-stable.
pub fn channel_stats<T: Scalar>(images: &Tensor<T>) -> Vec<(T, T)> {
    let shape = images.shape();
    assert!(shape.len() == 4, "expected [n, channels, h, w] images");
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            let at = (s * c + ch) * plane;
            for &v in &images.as_slice()[at..at + plane] {
                sum += v.as_f64();
            }
        }
        let count = (n * plane) as f64;
        let mean = if n == 0 { 0.0 } else { sum / count };
        let mut sq = 0.0f64;
        for s in 0..n {
            let at = (s * c + ch) * plane;
            for &v in &images.as_slice()[at..at + plane] {
                let d = v.as_f64() - mean;
                sq += d * d;
            }
        }
        let std = if n == 0 { 0.0 } else { (sq / count).sqrt() };
        stats.push((T::lit(mean), T::lit(std)));
    }
    stats
}

/// Reads a file, transparently gunzipping if it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| GeoCertError::Format(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Big-endian reader with truncation diagnostics.
struct IdxCursor<'a> {
    buf: &'a [u8],
    at: usize,
    name: &'a str,
}

impl<'a> IdxCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(GeoCertError::Format(format!(
                "{}: truncated, wanted {} bytes at offset {}, file has {}",
                self.name,
                n,
                self.at,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image/label file pair (plain or gzipped) into a dataset.
/// Pixels scale by 1/255; label bytes become class indices.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let ibuf = read_maybe_gzip(images_path)?;
    let mut ic = IdxCursor { buf: &ibuf, at: 0, name: "images" };
    let magic = ic.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GeoCertError::Format(format!(
            "images magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = ic.u32()? as usize;
    let h = ic.u32()? as usize;
    let w = ic.u32()? as usize;
    let pixels = ic.take(n * h * w)?;
    if ic.at != ibuf.len() {
        return Err(GeoCertError::Format(format!(
            "images: {} trailing bytes after {} pixels",
            ibuf.len() - ic.at,
            n * h * w
        )));
    }

    let lbuf = read_maybe_gzip(labels_path)?;
    let mut lc = IdxCursor { buf: &lbuf, at: 0, name: "labels" };
    let magic = lc.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GeoCertError::Format(format!(
            "labels magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = lc.u32()? as usize;
    if ln != n {
        return Err(GeoCertError::Format(format!("{n} images but {ln} labels")));
    }
    let labels: Vec<usize> = lc.take(ln)?.iter().map(|&b| b as usize).collect();

    let scale = 1.0 / 255.0;
    let data: Vec<T> = pixels.iter().map(|&b| T::lit(b as f64 * scale)).collect();
    let images = Tensor::from_vec(vec![n, 1, h, w], data);
    let channel_stats = channel_stats(&images);
    Ok(Dataset { images, labels, channel_stats })
}

fn write_maybe_gzip(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    if gzip {
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        std::io::Write::write_all(&mut enc, bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes a single-channel IDX image file; the synthetic counterpart of
/// `load_idx` for tests and fixtures.
pub fn write_idx_images(
    path: &Path,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    gzip: bool,
) -> Result<()> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count must match the header");
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    write_maybe_gzip(path, &bytes, gzip)
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8], gzip: bool) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_maybe_gzip(path, &bytes, gzip)
}

/// Uniform-random images and labels; deterministic in the seed.
pub fn synthetic_dataset<T: Scalar>(
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
) -> Dataset<T> {
    assert!(classes >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..n * channels * h * w).map(|_| T::lit(rng.gen::<f64>())).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let images = Tensor::from_vec(vec![n, channels, h, w], data);
    let channel_stats = channel_stats(&images);
    Dataset { images, labels, channel_stats }
}

const MODEL_FORMAT: &str = "geocert-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerDesc>,
    /// Number of f32 values in the blob.
    values: usize,
    /// SHA-256 of the raw blob bytes, lowercase hex.
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Normalize { channels: usize },
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: [usize; 2], stride: usize, padding: usize },
    Relu,
    Flatten,
    BatchNorm { channels: usize, eps: f64 },
}

fn push_f32<T: Scalar>(out: &mut Vec<f32>, vals: &[T]) {
    out.extend(vals.iter().map(|v| v.as_f64() as f32));
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Serializes the network: manifest line, newline, then all layer constants
/// as little-endian f32 in layer order (f64 nets are rounded).
pub fn save_model<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut vals: Vec<f32> = Vec::new();
    let mut descs = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Normalize { mean, std } => {
                descs.push(LayerDesc::Normalize { channels: mean.len() });
                push_f32(&mut vals, mean);
                push_f32(&mut vals, std);
            }
            Layer::Dense { w, b } => {
                descs.push(LayerDesc::Dense { inputs: w.shape()[1], outputs: w.shape()[0] });
                push_f32(&mut vals, w.as_slice());
                push_f32(&mut vals, b);
            }
            Layer::Conv2d { w, b, stride, padding } => {
                let s = w.shape();
                descs.push(LayerDesc::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: [s[2], s[3]],
                    stride: *stride,
                    padding: *padding,
                });
                push_f32(&mut vals, w.as_slice());
                push_f32(&mut vals, b);
            }
            Layer::Relu => descs.push(LayerDesc::Relu),
            Layer::Flatten => descs.push(LayerDesc::Flatten),
            Layer::BatchNormEval { scale, shift, mean, var, eps } => {
                descs.push(LayerDesc::BatchNorm { channels: scale.len(), eps: eps.as_f64() });
                push_f32(&mut vals, scale);
                push_f32(&mut vals, shift);
                push_f32(&mut vals, mean);
                push_f32(&mut vals, var);
            }
        }
    }
    let mut blob = Vec::with_capacity(vals.len() * 4);
    for v in &vals {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: descs,
        values: vals.len(),
        sha256: sha256_hex(&blob),
    };
    let mut out = serde_json::to_string(&manifest)?.into_bytes();
    out.push(b'\n');
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

struct ValCursor<'a, T> {
    vals: &'a [T],
    at: usize,
}

impl<'a, T: Scalar> ValCursor<'a, T> {
    fn take(&mut self, n: usize) -> Result<&'a [T]> {
        if self.at + n > self.vals.len() {
            return Err(GeoCertError::Format(
                "model blob ends before the manifest's layers do".into(),
            ));
        }
        let out = &self.vals[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
}

/// Loads a model saved by `save_model`, validating blob length, checksum,
/// schema version, and the layer shape chain.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| GeoCertError::Format("model file has no manifest line".into()))?;
    let manifest: ModelManifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != MODEL_FORMAT {
        return Err(GeoCertError::Format(format!("not a model file: format {:?}", manifest.format)));
    }
    if manifest.version != MODEL_VERSION {
        return Err(GeoCertError::Format(format!(
            "unsupported model schema version {} (this build reads {})",
            manifest.version, MODEL_VERSION
        )));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.values * 4 {
        return Err(GeoCertError::Format(format!(
            "model blob holds {} bytes, manifest promises {}",
            blob.len(),
            manifest.values * 4
        )));
    }
    let got = sha256_hex(blob);
    if got != manifest.sha256 {
        return Err(GeoCertError::Checksum { expected: manifest.sha256, got });
    }
    let vals: Vec<T> = blob
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let mut cur = ValCursor { vals: &vals, at: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for desc in &manifest.layers {
        layers.push(match *desc {
            LayerDesc::Normalize { channels } => Layer::Normalize {
                mean: cur.take(channels)?.to_vec(),
                std: cur.take(channels)?.to_vec(),
            },
            LayerDesc::Dense { inputs, outputs } => Layer::Dense {
                w: Tensor::from_vec(vec![outputs, inputs], cur.take(outputs * inputs)?.to_vec()),
                b: cur.take(outputs)?.to_vec(),
            },
            LayerDesc::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                Layer::Conv2d {
                    w: Tensor::from_vec(
                        vec![out_channels, in_channels, kernel[0], kernel[1]],
                        cur.take(out_channels * in_channels * kernel[0] * kernel[1])?.to_vec(),
                    ),
                    b: cur.take(out_channels)?.to_vec(),
                    stride,
                    padding,
                }
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Flatten => Layer::Flatten,
            LayerDesc::BatchNorm { channels, eps } => Layer::BatchNormEval {
                scale: cur.take(channels)?.to_vec(),
                shift: cur.take(channels)?.to_vec(),
                mean: cur.take(channels)?.to_vec(),
                var: cur.take(channels)?.to_vec(),
                eps: T::lit(eps),
            },
        });
    }
    if cur.at != vals.len() {
        return Err(GeoCertError::Format(format!(
            "model blob has {} values beyond the manifest's layers",
            vals.len() - cur.at
        )));
    }
    Network::new(manifest.input_shape, layers)
}

#[derive(Deserialize)]
struct ArchSpec {
    input_shape: Vec<usize>,
    #[serde(default)]
    normalize: bool,
    layers: Vec<ArchLayer>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ArchLayer {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, #[serde(default)] padding: usize },
    Dense { outputs: usize },
    Relu,
    Flatten,
}

/// Builds a He-initialized network from a JSON architecture description,
/// inferring every input dimension from the shape chain. When `normalize`
/// is set, a Normalize layer built from `stats` (one (mean, std) pair per
/// input channel) is prepended.
pub fn arch_from_json<T: Scalar>(
    json: &str,
    stats: &[(T, T)],
    seed: u64,
) -> Result<Network<T>> {
    let spec: ArchSpec = serde_json::from_str(json)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer<T>> = Vec::new();
    let mut shape = spec.input_shape.clone();
    if spec.normalize {
        let channels = shape[0];
        if stats.len() != channels {
            return Err(GeoCertError::InvalidParameter(format!(
                "normalize wants {} channel stats, got {}",
                channels,
                stats.len()
            )));
        }
        layers.push(Layer::Normalize {
            mean: stats.iter().map(|s| s.0).collect(),
            std: stats.iter().map(|s| s.1).collect(),
        });
    }
    for l in &spec.layers {
        match *l {
            ArchLayer::Conv2d { out_channels, kernel, stride, padding } => {
                if shape.len() != 3 {
                    return Err(GeoCertError::ShapeMismatch {
                        expected: "[channels, h, w] before conv2d".into(),
                        got: format!("{shape:?}"),
                    });
                }
                if stride == 0 || shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel
                {
                    return Err(GeoCertError::InvalidParameter(format!(
                        "conv2d kernel {kernel} stride {stride} does not fit {shape:?}"
                    )));
                }
                layers.push(Layer::conv2d_init(&mut rng, shape[0], out_channels, kernel, stride, padding));
                let (oh, ow) = conv_out_dims(shape[1], shape[2], kernel, kernel, stride, padding);
                shape = vec![out_channels, oh, ow];
            }
            ArchLayer::Dense { outputs } => {
                if shape.len() != 1 {
                    return Err(GeoCertError::ShapeMismatch {
                        expected: "flattened input before dense".into(),
                        got: format!("{shape:?}"),
                    });
                }
                layers.push(Layer::dense_init(&mut rng, shape[0], outputs));
                shape = vec![outputs];
            }
            ArchLayer::Relu => layers.push(Layer::Relu),
            ArchLayer::Flatten => {
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
        }
    }
    Network::new(spec.input_shape, layers)
}

/// Pretty-printed JSON report with a trailing newline.
pub fn emit_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Formats a float the way the JSON reports do, so CSV and JSON of the same
/// run display identical numbers.
fn json_num(v: f64) -> String {
    serde_json::Value::from(v).to_string()
}

/// Per-image certification table plus an aggregate footer comment.
pub fn cert_report_csv(report: &DatasetReport) -> String {
    let mut s = String::from("index,label,predicted,certified,margin,failing_split\n");
    for pi in &report.per_image {
        let failing = pi.failing_split.map_or(String::new(), |k| k.to_string());
        writeln!(
            s,
            "{},{},{},{},{},{}",
            pi.index,
            pi.label,
            pi.predicted,
            pi.certified,
            json_num(pi.margin),
            failing
        )
        .unwrap();
    }
    let a = &report.aggregate;
    writeln!(
        s,
        "# images={} clean_acc={} certified={} certified_given_clean={} sec_per_image={}",
        a.images,
        json_num(a.clean_acc),
        json_num(a.certified),
        json_num(a.certified_given_clean),
        json_num(a.sec_per_image)
    )
    .unwrap();
    s
}

/// One row per epoch; multi-parameter nu joins with ';' to stay one column.
pub fn train_log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,kappa,nu,lr,mean_loss\n");
    for e in &log.entries {
        let nu = e.nu.iter().map(|v| json_num(*v)).collect::<Vec<_>>().join(";");
        writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            json_num(e.kappa),
            nu,
            json_num(e.lr),
            json_num(e.mean_loss)
        )
        .unwrap();
    }
    s
}
