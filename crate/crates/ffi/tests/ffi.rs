use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rgba_dit::cli::{self, ExperimentConfig, Phase};
use rgba_dit_ffi::*;

const TINY: [&str; 13] = [
    "model.depth=1",
    "model.dim=32",
    "model.heads=2",
    "model.frames=2",
    "model.height=8",
    "model.width=8",
    "model.time_embed_dim=16",
    "model.lora_rank=4",
    "dataset.n_scenes=4",
    "pretrain.steps=2",
    "finetune.steps=2",
    "sampler.steps=3",
    "eval.videos=1",
];

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { rd_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn load_config(sets: &[String]) -> (i32, *mut RdConfig) {
    let owned: Vec<CString> = sets.iter().map(|s| CString::new(s.as_str()).unwrap()).collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|s| s.as_ptr()).collect();
    let mut out = ptr::null_mut();
    let status = unsafe { rd_config_load(ptr::null(), ptrs.as_ptr(), ptrs.len(), &mut out) };
    (status, out)
}

fn trained(dir: &Path) -> (Vec<String>, PathBuf, PathBuf) {
    let mut sets: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    sets.push(format!("output_dir={:?}", dir.display().to_string()));
    let cfg = ExperimentConfig::load(None, &sets).unwrap();
    cli::gen_dataset(&cfg).unwrap();
    let base = cli::train(&cfg, Phase::Pretrain, None, None, None).unwrap();
    let tuned = cli::train(&cfg, Phase::Finetune, None, None, None).unwrap();
    (sets, base.checkpoint, tuned.checkpoint)
}

#[test]
fn sample_and_score_through_the_c_abi() {
    let tmp = tempfile::tempdir().unwrap();
    let (sets, _, ckpt) = trained(tmp.path());
    let (status, config) = load_config(&sets);
    assert_eq!(status, RD_OK);
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { rd_model_load(path.as_ptr(), &mut model) }, RD_OK);
    let mut info = RdModelInfo::default();
    assert_eq!(unsafe { rd_model_info(model, &mut info) }, RD_OK);
    assert_eq!((info.frames, info.height, info.width, info.has_alpha), (2, 8, 8, 1));

    let mut video = ptr::null_mut();
    assert_eq!(unsafe { rd_sample(model, config, 3, 7, 0, &mut video) }, RD_OK);
    let (mut f, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { rd_video_dims(video, &mut f, &mut h, &mut w) }, RD_OK);
    let mut buf = vec![0.0; f * h * w * 4];
    assert_eq!(unsafe { rd_video_copy_rgba(video, buf.as_mut_ptr(), buf.len() - 1) }, RD_ERR_ARGUMENT);
    assert_eq!(unsafe { rd_video_copy_rgba(video, buf.as_mut_ptr(), buf.len()) }, RD_OK);
    assert!(buf.iter().all(|v| (0.0..=1.0).contains(v)));

    // same seed through the library
    let cfg = ExperimentConfig::load(None, &sets).unwrap();
    let direct = cli::sample_video(
        &rgba_dit::model::checkpoint::load(&ckpt).unwrap(),
        &cfg,
        3,
        &rgba_dit::diffusion::SamplerConfig { steps: 3, seed: 7 },
    )
    .unwrap();
    assert_eq!(direct.data(), &buf[..]);

    let mut fd = -1.0;
    assert_eq!(unsafe { rd_video_flow_difference(video, config, &mut fd) }, RD_OK);
    assert!(fd >= 0.0);
    let mut iou = -1.0;
    let status = unsafe { rd_video_alignment_iou(video, config, &mut iou) };
    assert!(status == RD_OK || status == RD_ERR_NO_DATA);

    unsafe {
        rd_video_free(video);
        rd_model_free(model);
        rd_config_free(config);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let (status, config) = load_config(&["model.heads=3".into()]);
    assert_eq!(status, RD_ERR_CONFIG);
    assert!(config.is_null());
    assert!(!last_error().is_empty());

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { rd_model_load(ptr::null(), &mut model) }, RD_ERR_ARGUMENT);
    assert_eq!(last_error(), "path is null");
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { rd_model_load(missing.as_ptr(), &mut model) }, RD_ERR_IO);
    assert!(model.is_null());

    let mut v = ptr::null_mut();
    let empty = tempfile::tempdir().unwrap();
    std::fs::write(empty.path().join("video.json"), "{").unwrap();
    let dir = CString::new(empty.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rd_video_read_dir(dir.as_ptr(), &mut v) }, RD_ERR_FORMAT);
    let mut out = 0.0;
    assert_eq!(unsafe { rd_video_flow_difference(ptr::null(), ptr::null(), &mut out) }, RD_ERR_ARGUMENT);

    // truncation keeps the NUL and reports the full length
    let mut small = [1 as c_char; 4];
    let full = unsafe { rd_last_error(small.as_mut_ptr(), small.len()) };
    assert!(full > 3);
    assert_eq!(small[3], 0);
    unsafe {
        rd_config_free(ptr::null_mut());
        rd_model_free(ptr::null_mut());
        rd_video_free(ptr::null_mut());
    }
}

#[test]
fn mismatched_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, base, _) = trained(tmp.path());
    let (status, config) = load_config(&[]);
    assert_eq!(status, RD_OK);
    let path = CString::new(base.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { rd_model_load(path.as_ptr(), &mut model) }, RD_OK);
    let mut info = RdModelInfo::default();
    assert_eq!(unsafe { rd_model_info(model, &mut info) }, RD_OK);
    assert_eq!(info.has_alpha, 0);
    let mut video = ptr::null_mut();
    assert_eq!(unsafe { rd_sample(model, config, 0, 0, 1, &mut video) }, RD_ERR_CONFIG);
    assert!(video.is_null());
    unsafe {
        rd_model_free(model);
        rd_config_free(config);
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "rgba_dit.h"

int main(void) {
    RdConfig *cfg = NULL;
    const char *sets[] = {"model.heads=3"};
    int rc = rd_config_load(NULL, sets, 1, &cfg);
    char msg[128];
    rd_last_error(msg, sizeof msg);
    if (rc != RD_ERR_CONFIG || cfg != NULL || strlen(msg) == 0) return 1;
    rc = rd_config_load(NULL, NULL, 0, &cfg);
    if (rc != RD_OK || cfg == NULL) return 2;
    rd_config_free(cfg);
    printf("%s\n", rd_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps; the cdylib sits one level up
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !lib_dir.join("librgba_dit_ffi.so").exists() {
        eprintln!("cdylib not found in {}; skipping", lib_dir.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg(format!("-I{}", crate_dir.join("include").display()))
        .arg(format!("-L{}", lib_dir.display()))
        .arg("-lrgba_dit_ffi")
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
