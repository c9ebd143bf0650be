//! Binary file formats.
//!
//! Every file is one line of JSON (the header) followed by a payload of
//! little-endian arrays. The header names the format, its version, format
//! specific metadata and the payload sections in order:
//!
//! ```text
//! {"format":"moesplat-scene","version":1,"meta":{...},"sections":[{"name":"gaussians","dtype":"f32","len":140}]}\n
//! <140 little-endian f32 values>
//! ```
//!
//! Gaussian attributes are stored as `f32` with 14 values per Gaussian in
//! the order mean xyz, quaternion wxyz, scale xyz, opacity, rgb. Images are
//! stored as `f32` in row-major `(y, x, channel)` order. Motion, network and
//! router parameters are stored as `f64` so trained state round-trips
//! exactly. The motion section of an expert checkpoint starts with a kind
//! tag byte and a section version byte.
//!
//! The codecs are pure: they encode to and decode from byte buffers.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Camera, Dataset, Gaussian3D, GroundTruth, Regime, Resolution, Split, View};
use crate::error::{Error, Result};
use crate::experts::{DeformNet, ExpertKind, ExpertModel, Motion, Trainable};
use crate::image::ImageBuffer;
use crate::router::{ConvNet, PerExpert, PerGaussianWeights, Router, RouterKind};

pub const SCENE_FORMAT: &str = "moesplat-scene";
pub const DATASET_FORMAT: &str = "moesplat-dataset";
pub const EXPERT_FORMAT: &str = "moesplat-expert";
pub const GROUND_TRUTH_FORMAT: &str = "moesplat-ground-truth";
pub const ROUTER_FORMAT: &str = "moesplat-router";
pub const IMAGE_FORMAT: &str = "moesplat-image";
pub const VERSION: u32 = 1;
/// Version byte at the start of an expert motion section.
pub const MOTION_SECTION_VERSION: u8 = 1;
/// Values per Gaussian in a Gaussian block.
pub const GAUSSIAN_STRIDE: usize = 14;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionInfo {
    name: String,
    dtype: Dtype,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    format: String,
    version: u32,
    meta: M,
    sections: Vec<SectionInfo>,
}

#[derive(Default)]
struct Writer {
    sections: Vec<SectionInfo>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: &str, dtype: Dtype, len: usize) {
        self.sections.push(SectionInfo {
            name: name.to_string(),
            dtype,
            len,
        });
    }

    fn f32s(&mut self, name: &str, values: &[f64]) {
        self.push(name, Dtype::F32, values.len());
        for v in values {
            self.payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    fn f64s(&mut self, name: &str, values: &[f64]) {
        self.push(name, Dtype::F64, values.len());
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, name: &str, values: &[u8]) {
        self.push(name, Dtype::U8, values.len());
        self.payload.extend_from_slice(values);
    }

    fn finish<M: Serialize>(self, format: &str, meta: M) -> Result<Vec<u8>> {
        let header = Header {
            format: format.to_string(),
            version: VERSION,
            meta,
            sections: self.sections,
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        out.push(b'\n');
        out.extend(self.payload);
        Ok(out)
    }
}

struct Reader<'a> {
    sections: std::vec::IntoIter<(SectionInfo, &'a [u8])>,
}

/// Parses the header, checks format and version, and slices the payload.
fn open<'a, M: DeserializeOwned>(bytes: &'a [u8], format: &str) -> Result<(M, Reader<'a>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("missing header line"))?;
    let header: Header<M> =
        serde_json::from_slice(&bytes[..split]).map_err(|e| format_err(format!("bad header: {e}")))?;
    if header.format != format {
        return Err(format_err(format!("expected a {format} file, found {}", header.format)));
    }
    if header.version != VERSION {
        return Err(format_err(format!("unsupported {format} version {}", header.version)));
    }
    let mut rest = &bytes[split + 1..];
    let mut sections = Vec::with_capacity(header.sections.len());
    for info in header.sections {
        let size = info
            .len
            .checked_mul(info.dtype.size())
            .filter(|&n| n <= rest.len())
            .ok_or_else(|| format_err(format!("section `{}` is truncated", info.name)))?;
        let (data, tail) = rest.split_at(size);
        sections.push((info, data));
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(format_err(format!("{} trailing payload bytes", rest.len())));
    }
    Ok((
        header.meta,
        Reader {
            sections: sections.into_iter(),
        },
    ))
}

impl<'a> Reader<'a> {
    fn next(&mut self, name: &str, dtype: Dtype) -> Result<&'a [u8]> {
        let (info, data) = self
            .sections
            .next()
            .ok_or_else(|| format_err(format!("missing section `{name}`")))?;
        if info.name != name || info.dtype != dtype {
            return Err(format_err(format!(
                "expected section `{name}` ({dtype:?}), found `{}` ({:?})",
                info.name, info.dtype
            )));
        }
        Ok(data)
    }

    fn floats(&mut self, name: &str, dtype: Dtype, len: usize) -> Result<Vec<f64>> {
        let data = self.next(name, dtype)?;
        let values: Vec<f64> = match dtype {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
            _ => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        if values.len() != len {
            return Err(format_err(format!("section `{name}` has {} values, expected {len}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format_err(format!("section `{name}` contains non-finite values")));
        }
        Ok(values)
    }

    fn f32s(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.floats(name, Dtype::F32, len)
    }

    fn f64s(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.floats(name, Dtype::F64, len)
    }

    fn bytes(&mut self, name: &str) -> Result<&'a [u8]> {
        self.next(name, Dtype::U8)
    }

    fn done(mut self) -> Result<()> {
        match self.sections.next() {
            Some((info, _)) => Err(format_err(format!("unexpected section `{}`", info.name))),
            None => Ok(()),
        }
    }
}

fn quaternion(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let n = q.norm();
    if !(n > 0.5 && n < 1.5) {
        return Err(format_err(format!("quaternion norm {n} is far from 1")));
    }
    // Exactly-unit quaternions are kept bit for bit.
    if (n - 1.0).abs() <= 1e-12 {
        Ok(Unit::new_unchecked(q))
    } else {
        Ok(UnitQuaternion::from_quaternion(q))
    }
}

fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn gaussian_block(gaussians: &[Gaussian3D]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gaussians.len() * GAUSSIAN_STRIDE);
    for g in gaussians {
        out.extend(g.mean().iter());
        out.extend(wxyz(g.rotation()));
        out.extend(g.scale().iter());
        out.push(g.opacity());
        out.extend(g.color().iter());
    }
    out
}

fn parse_gaussians(block: &[f64]) -> Result<Vec<Gaussian3D>> {
    block
        .chunks_exact(GAUSSIAN_STRIDE)
        .map(|c| {
            Gaussian3D::new(
                Vector3::new(c[0], c[1], c[2]),
                quaternion([c[3], c[4], c[5], c[6]])?,
                Vector3::new(c[7], c[8], c[9]),
                c[10],
                Vector3::new(c[11], c[12], c[13]),
            )
        })
        .collect()
}

/// Camera parameters as stored in headers (exact `f64` round trip).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    position: [f64; 3],
    orientation_wxyz: [f64; 4],
    focal: [f64; 2],
    principal_point: [f64; 2],
    height: usize,
    width: usize,
    near_clip: f64,
}

impl CameraRecord {
    fn from_camera(c: &Camera) -> Self {
        Self {
            position: [c.position().x, c.position().y, c.position().z],
            orientation_wxyz: wxyz(c.orientation()),
            focal: [c.focal().x, c.focal().y],
            principal_point: [c.principal_point().x, c.principal_point().y],
            height: c.resolution().height,
            width: c.resolution().width,
            near_clip: c.near_clip(),
        }
    }

    fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            Vector3::from(self.position),
            quaternion(self.orientation_wxyz)?,
            Vector2::from(self.focal),
            Vector2::from(self.principal_point),
            Resolution::new(self.height, self.width),
            self.near_clip,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    gaussians: usize,
    cameras: Vec<CameraRecord>,
}

/// A static Gaussian set plus cameras.
pub fn encode_scene(gaussians: &[Gaussian3D], cameras: &[Camera]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.f32s("gaussians", &gaussian_block(gaussians));
    w.finish(
        SCENE_FORMAT,
        SceneMeta {
            gaussians: gaussians.len(),
            cameras: cameras.iter().map(CameraRecord::from_camera).collect(),
        },
    )
}

pub fn decode_scene(bytes: &[u8]) -> Result<(Vec<Gaussian3D>, Vec<Camera>)> {
    let (meta, mut r): (SceneMeta, _) = open(bytes, SCENE_FORMAT)?;
    let gaussians = parse_gaussians(&r.f32s("gaussians", meta.gaussians * GAUSSIAN_STRIDE)?)?;
    r.done()?;
    let cameras = meta.cameras.iter().map(CameraRecord::to_camera).collect::<Result<_>>()?;
    Ok((gaussians, cameras))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    camera: CameraRecord,
    time: f64,
    split: String,
    has_ground_truth: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    channels: usize,
    views: Vec<ViewRecord>,
}

fn split_from(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format_err(format!("unknown split `{other}`"))),
    }
}

/// Views with their cameras, times, splits and ground-truth images.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let channels = dataset
        .views()
        .iter()
        .find_map(|v| v.ground_truth.as_ref().map(ImageBuffer::channels))
        .unwrap_or(3);
    let mut w = Writer::default();
    let mut views = Vec::with_capacity(dataset.len());
    for (i, v) in dataset.views().iter().enumerate() {
        if let Some(gt) = &v.ground_truth {
            if gt.channels() != channels {
                return Err(Error::input("ground-truth images must share one channel count"));
            }
            w.f32s(&format!("view{i}"), gt.data());
        }
        views.push(ViewRecord {
            camera: CameraRecord::from_camera(&v.camera),
            time: v.time,
            split: v.split.as_str().to_string(),
            has_ground_truth: v.ground_truth.is_some(),
        });
    }
    w.finish(DATASET_FORMAT, DatasetMeta { channels, views })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (meta, mut r): (DatasetMeta, _) = open(bytes, DATASET_FORMAT)?;
    let mut views = Vec::with_capacity(meta.views.len());
    for (i, rec) in meta.views.iter().enumerate() {
        let camera = rec.camera.to_camera()?;
        let res = camera.resolution();
        let mut view = View::new(camera, rec.time, split_from(&rec.split)?)?;
        if rec.has_ground_truth {
            let data = r.f32s(&format!("view{i}"), res.pixels() * meta.channels)?;
            view = view.with_ground_truth(ImageBuffer::from_vec(res.height, res.width, meta.channels, data)?)?;
        }
        views.push(view);
    }
    r.done()?;
    Dataset::new(views)
}

/// Kind-specific motion metadata of an expert checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertMeta {
    kind: ExpertKind,
    gaussians: usize,
    degree: Option<usize>,
    keyframe_times: Option<Vec<f64>>,
    latent_dim: Option<usize>,
    hidden: Option<usize>,
    trainable: [bool; 4],
}

/// Writes one expert as three sections: its Gaussians at `t = 0`
/// (informational), the tagged motion section and the network section.
fn write_expert(w: &mut Writer, prefix: &str, e: &ExpertModel) -> Result<ExpertMeta> {
    let (degree, keyframe_times, latent_dim, hidden, network): (_, _, _, _, &[f64]) = match e.motion() {
        Motion::Polynomial { degree, .. } => (Some(*degree), None, None, None, &[]),
        Motion::Keyframe { times, .. } => (None, Some(times.clone()), None, None, &[]),
        Motion::Deform { net, .. } => (None, None, Some(net.latent_dim()), Some(net.hidden()), net.params()),
    };
    w.f32s(&format!("{prefix}gaussians"), &gaussian_block(&e.gaussians_at(0.0)?));
    w.f32s(&format!("{prefix}rotations"), &e.rotations().iter().flat_map(wxyz).collect::<Vec<_>>());
    w.f32s(&format!("{prefix}scales"), &e.scales().iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>());
    w.f32s(&format!("{prefix}colors"), e.params(crate::experts::ParamGroup::Color));
    w.f32s(&format!("{prefix}opacities"), e.params(crate::experts::ParamGroup::Opacity));
    let motion = e.params(crate::experts::ParamGroup::Motion);
    let mut section = vec![e.kind().tag(), MOTION_SECTION_VERSION];
    for v in motion {
        section.extend_from_slice(&v.to_le_bytes());
    }
    w.bytes(&format!("{prefix}motion"), &section);
    w.f64s(&format!("{prefix}network"), network);
    let t = e.trainable();
    Ok(ExpertMeta {
        kind: e.kind(),
        gaussians: e.len(),
        degree,
        keyframe_times,
        latent_dim,
        hidden,
        trainable: [t.color, t.opacity, t.motion, t.network],
    })
}

fn read_expert(r: &mut Reader<'_>, prefix: &str, meta: &ExpertMeta) -> Result<ExpertModel> {
    let n = meta.gaussians;
    r.f32s(&format!("{prefix}gaussians"), n * GAUSSIAN_STRIDE)?;
    let rotations = r
        .f32s(&format!("{prefix}rotations"), 4 * n)?
        .chunks_exact(4)
        .map(|c| quaternion([c[0], c[1], c[2], c[3]]))
        .collect::<Result<Vec<_>>>()?;
    let scales = r
        .f32s(&format!("{prefix}scales"), 3 * n)?
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let colors = r.f32s(&format!("{prefix}colors"), 3 * n)?;
    let opacities = r.f32s(&format!("{prefix}opacities"), n)?;
    let section = r.bytes(&format!("{prefix}motion"))?;
    if section.len() < 2 || (section.len() - 2) % 8 != 0 {
        return Err(format_err("malformed motion section"));
    }
    let kind = ExpertKind::from_tag(section[0])?;
    if kind != meta.kind {
        return Err(format_err(format!("motion section is tagged {kind}, header says {}", meta.kind)));
    }
    if section[1] != MOTION_SECTION_VERSION {
        return Err(format_err(format!("unsupported motion section version {}", section[1])));
    }
    let params: Vec<f64> = section[2..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(format_err("motion section contains non-finite values"));
    }
    let missing = |what: &str| format_err(format!("{kind} checkpoint lacks `{what}`"));
    let (motion, net_len) = match kind {
        ExpertKind::Polynomial => (
            Motion::Polynomial {
                degree: meta.degree.ok_or_else(|| missing("degree"))?,
                coeffs: params,
            },
            0,
        ),
        ExpertKind::Keyframe => (
            Motion::Keyframe {
                times: meta.keyframe_times.clone().ok_or_else(|| missing("keyframe_times"))?,
                means: params,
            },
            0,
        ),
        ExpertKind::Deform => {
            let latent = meta.latent_dim.ok_or_else(|| missing("latent_dim"))?;
            let hidden = meta.hidden.ok_or_else(|| missing("hidden"))?;
            let len = DeformNet::parameter_count(latent, hidden);
            (
                Motion::Deform {
                    params,
                    net: DeformNet::from_params(latent, hidden, vec![0.0; len])?,
                },
                len,
            )
        }
    };
    let network = r.f64s(&format!("{prefix}network"), net_len)?;
    let mut model = ExpertModel::new(rotations, scales, colors, opacities, motion)?;
    model.params_mut(crate::experts::ParamGroup::Network).copy_from_slice(&network);
    let [color, opacity, motion, network] = meta.trainable;
    model.set_trainable(Trainable {
        color,
        opacity,
        motion,
        network,
    });
    Ok(model)
}

/// An expert checkpoint. Colors, opacities and geometry are stored as
/// `f32`; motion and network parameters exactly.
pub fn encode_expert(expert: &ExpertModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let meta = write_expert(&mut w, "", expert)?;
    w.finish(EXPERT_FORMAT, meta)
}

pub fn decode_expert(bytes: &[u8]) -> Result<ExpertModel> {
    let (meta, mut r): (ExpertMeta, _) = open(bytes, EXPERT_FORMAT)?;
    let e = read_expert(&mut r, "", &meta)?;
    r.done()?;
    Ok(e)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthMeta {
    regimes: Vec<Regime>,
    parts: Vec<ExpertMeta>,
}

/// The generator's per-region Gaussians.
pub fn encode_ground_truth(gt: &GroundTruth) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let parts = gt
        .parts
        .iter()
        .enumerate()
        .map(|(i, p)| write_expert(&mut w, &format!("part{i}."), p))
        .collect::<Result<_>>()?;
    w.finish(
        GROUND_TRUTH_FORMAT,
        GroundTruthMeta {
            regimes: gt.regimes.clone(),
            parts,
        },
    )
}

pub fn decode_ground_truth(bytes: &[u8]) -> Result<GroundTruth> {
    let (meta, mut r): (GroundTruthMeta, _) = open(bytes, GROUND_TRUTH_FORMAT)?;
    if meta.regimes.len() != meta.parts.len() {
        return Err(format_err("one regime per ground-truth part required"));
    }
    let parts = meta
        .parts
        .iter()
        .enumerate()
        .map(|(i, m)| read_expert(&mut r, &format!("part{i}."), m))
        .collect::<Result<_>>()?;
    r.done()?;
    Ok(GroundTruth {
        regimes: meta.regimes,
        parts,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouterMeta {
    kind: RouterKind,
    /// Gaussians per expert for per-Gaussian state; empty for the pixel router.
    counts: Vec<usize>,
    /// `(inputs, hidden, outputs)` of the convolutional network, if any.
    net: Option<[usize; 3]>,
}

/// A router checkpoint; all parameters stored exactly.
pub fn encode_router(router: &Router) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let net_dims = |n: &ConvNet| Some([n.inputs(), n.hidden(), n.outputs()]);
    let meta = match router {
        Router::VolumeAware { weights, phi } => {
            w.f64s("w", weights.w.values());
            w.f64s("w_dir", weights.w_dir.values());
            w.f64s("w_time", weights.w_time.values());
            w.f64s("phi", phi.params());
            RouterMeta {
                kind: RouterKind::VolumeAware,
                counts: weights.counts(),
                net: net_dims(phi),
            }
        }
        Router::Pixel { net } => {
            w.f64s("net", net.params());
            RouterMeta {
                kind: RouterKind::Pixel,
                counts: Vec::new(),
                net: net_dims(net),
            }
        }
        Router::Volume { logits } => {
            w.f64s("logits", logits.values());
            RouterMeta {
                kind: RouterKind::Volume,
                counts: logits.counts(),
                net: None,
            }
        }
    };
    w.finish(ROUTER_FORMAT, meta)
}

pub fn decode_router(bytes: &[u8]) -> Result<Router> {
    let (meta, mut r): (RouterMeta, _) = open(bytes, ROUTER_FORMAT)?;
    let total: usize = meta.counts.iter().sum();
    let net = |r: &mut Reader<'_>, name: &str| -> Result<ConvNet> {
        let [i, h, o] = meta.net.ok_or_else(|| format_err("router checkpoint lacks network dimensions"))?;
        let len = ConvNet::zeros(i, h, o).params().len();
        ConvNet::from_params(i, h, o, r.f64s(name, len)?)
    };
    let router = match meta.kind {
        RouterKind::VolumeAware => {
            let mut per = |name: &str| PerExpert::from_values(&meta.counts, r.f64s(name, total)?);
            let weights = PerGaussianWeights {
                w: per("w")?,
                w_dir: per("w_dir")?,
                w_time: per("w_time")?,
            };
            Router::VolumeAware {
                weights,
                phi: net(&mut r, "phi")?,
            }
        }
        RouterKind::Pixel => Router::Pixel { net: net(&mut r, "net")? },
        RouterKind::Volume => Router::Volume {
            logits: PerExpert::from_values(&meta.counts, r.f64s("logits", total)?)?,
        },
    };
    r.done()?;
    Ok(router)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageMeta {
    height: usize,
    width: usize,
    channels: usize,
}

/// A float image sidecar (`f32`, any channel count).
pub fn encode_image(image: &ImageBuffer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.f32s("pixels", image.data());
    w.finish(
        IMAGE_FORMAT,
        ImageMeta {
            height: image.height(),
            width: image.width(),
            channels: image.channels(),
        },
    )
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let (m, mut r): (ImageMeta, _) = open(bytes, IMAGE_FORMAT)?;
    let data = r.f32s("pixels", m.height * m.width * m.channels)?;
    r.done()?;
    ImageBuffer::from_vec(m.height, m.width, m.channels, data)
}

#[cfg(test)]
mod tests;
