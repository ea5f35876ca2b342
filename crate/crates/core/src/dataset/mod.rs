//! Synthetic sprite videos with exact alpha, preprocessing formulas, token
//! conversion and frame-file persistence.

pub mod pam;
mod preprocess;
mod scene;
mod tokens;
mod video;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use preprocess::{
    blend_with_mask, blur_background, color_decontaminate, effective_kernel, gaussian_blur_rgb, refine_mask,
    DecontaminateConfig, DecontaminateOrientation, DEFAULT_BLUR_KERNEL,
};
pub use scene::{background_at, class_of, cond_id, synthesize_scene, Motion, SceneSpec, Shape};
pub use tokens::{patchify, rgb_tokens_to_video, tokens_to_video, unpatchify, video_to_tokens, Geometry};
pub use video::RgbaVideo;

use crate::error::{Error, Result};
use crate::io;
use crate::model::NUM_CONDITIONS;

pub const VIDEO_MANIFEST: &str = "video.json";
pub const DATASET_INDEX: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub fps: u32,
    /// Replace each scene's background by its blurred first frame.
    pub blur_background: bool,
    pub blur_kernel: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_scenes: 512, seed: 0, fps: 8, blur_background: false, blur_kernel: DEFAULT_BLUR_KERNEL }
    }
}

/// Sidecar manifest of one video directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub cond_id: usize,
    pub seed: u64,
    /// Present for synthesized scenes.
    pub spec: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<String>,
    /// SHA-256 over every scene's frame files and manifest, in order.
    pub content_hash: String,
}

pub fn frame_file(f: usize) -> String {
    format!("frame_{f:04}.pam")
}

/// Scene `i` cycles through the classes so every class is represented.
pub fn scene_specs(config: &DatasetConfig) -> Result<Vec<SceneSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_scenes).map(|i| SceneSpec::for_class(i % NUM_CONDITIONS, rng.gen())).collect()
}

pub fn generate(
    config: &DatasetConfig,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<(SceneSpec, RgbaVideo)>> {
    scene_specs(config)?
        .into_iter()
        .map(|spec| {
            let (mut video, _) = synthesize_scene(&spec, frames, height, width)?;
            if config.blur_background {
                video = blur_background(&video, config.blur_kernel)?;
            }
            Ok((spec, video))
        })
        .collect()
}

fn video_bytes(video: &RgbaVideo, f: usize) -> Result<Vec<u8>> {
    let n = video.frame_len() * 4;
    pam::encode(&pam::PamImage {
        width: video.width(),
        height: video.height(),
        tuple_type: pam::TupleType::RgbAlpha,
        samples: video.data()[f * n..(f + 1) * n].to_vec(),
    })
}

/// Writes `frame_XXXX.pam` files plus the manifest; returns the hash of
/// their bytes.
pub fn write_video_dir(dir: &Path, video: &RgbaVideo, manifest: &VideoManifest) -> Result<String> {
    let mut all = Vec::new();
    for f in 0..video.frames() {
        let bytes = video_bytes(video, f)?;
        io::write_atomic(&dir.join(frame_file(f)), &bytes)?;
        all.extend(bytes);
    }
    let mut text = serde_json::to_vec_pretty(manifest)?;
    text.push(b'\n');
    io::write_atomic(&dir.join(VIDEO_MANIFEST), &text)?;
    all.extend(text);
    Ok(io::sha256_hex(&all))
}

/// Loads a video directory and the hash of its files.
pub fn read_video_dir(dir: &Path) -> Result<(RgbaVideo, VideoManifest, String)> {
    let manifest_path = dir.join(VIDEO_MANIFEST);
    let text = io::read(&manifest_path)?;
    let manifest: VideoManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let mut data = Vec::with_capacity(manifest.frames * manifest.height * manifest.width * 4);
    let mut all = Vec::new();
    for f in 0..manifest.frames {
        let path = dir.join(frame_file(f));
        let bytes = io::read(&path)?;
        let img = pam::decode(&bytes, &path)?;
        if img.tuple_type != pam::TupleType::RgbAlpha || img.width != manifest.width || img.height != manifest.height {
            return Err(Error::format(&path, "frame does not match the manifest dimensions"));
        }
        data.extend(img.samples);
        all.extend(bytes);
    }
    all.extend(text);
    let video = RgbaVideo::new(manifest.frames, manifest.height, manifest.width, data)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((video, manifest, io::sha256_hex(&all)))
}

pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Generates and writes the dataset; returns its index.
pub fn write_dataset(
    dir: &Path,
    config: &DatasetConfig,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<DatasetIndex> {
    let scenes = generate(config, frames, height, width)?;
    let mut names = Vec::with_capacity(scenes.len());
    let mut hashes = String::new();
    for (i, (spec, video)) in scenes.iter().enumerate() {
        let name = scene_dir_name(i);
        let manifest = VideoManifest {
            frames,
            height,
            width,
            fps: config.fps,
            cond_id: spec.cond_id(),
            seed: spec.seed,
            spec: Some(spec.clone()),
        };
        hashes.push_str(&write_video_dir(&dir.join(&name), video, &manifest)?);
        names.push(name);
    }
    let index = DatasetIndex {
        config: config.clone(),
        frames,
        height,
        width,
        scenes: names,
        content_hash: io::sha256_hex(hashes.as_bytes()),
    };
    io::write_json(&dir.join(DATASET_INDEX), &index)?;
    Ok(index)
}

pub struct LoadedScene {
    pub dir: PathBuf,
    pub video: RgbaVideo,
    pub manifest: VideoManifest,
    pub hash: String,
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<LoadedScene>)> {
    let path = dir.join(DATASET_INDEX);
    let index: DatasetIndex =
        serde_json::from_slice(&io::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if index.scenes.is_empty() {
        return Err(Error::NoInput(format!("dataset {} has no scenes", dir.display())));
    }
    let scenes = index
        .scenes
        .iter()
        .map(|name| {
            let d = dir.join(name);
            let (video, manifest, hash) = read_video_dir(&d)?;
            Ok(LoadedScene { dir: d, video, manifest, hash })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, scenes))
}
