use std::path::{Path, PathBuf};

use epimask::geometry::AffineCamera;
use epimask::groundtruth::{SceneConfig, SceneData};
use epimask::io::{encode_pgm, encode_wpm, read_pgm, read_wpm};

use crate::error::CliError;
use crate::manifest::{read_manifest, Run};

pub const FILES: [&str; 6] = ["left.pgm", "right.pgm", "left.wpm", "right.wpm", "left_camera.json", "right_camera.json"];

/// A scene directory as written by `epimask scene`.
pub struct SceneDir {
    pub dir: PathBuf,
    pub data: SceneData,
    pub cfg: SceneConfig,
}

pub fn read_camera(path: &Path) -> Result<AffineCamera, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_scene(run: &mut Run, data: &SceneData) -> Result<(), CliError> {
    let cam = |c: &AffineCamera| serde_json::to_vec_pretty(c).expect("camera serializes");
    run.write("left.pgm", &encode_pgm(&data.image_l))?;
    run.write("right.pgm", &encode_pgm(&data.image_r))?;
    run.write("left.wpm", &encode_wpm(&data.wpm_l))?;
    run.write("right.wpm", &encode_wpm(&data.wpm_r))?;
    run.write("left_camera.json", &cam(&data.cam_l))?;
    run.write("right_camera.json", &cam(&data.cam_r))?;
    Ok(())
}

impl SceneDir {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let data = SceneData {
            image_l: read_pgm(&dir.join("left.pgm"))?,
            image_r: read_pgm(&dir.join("right.pgm"))?,
            wpm_l: read_wpm(&dir.join("left.wpm"))?,
            wpm_r: read_wpm(&dir.join("right.wpm"))?,
            cam_l: read_camera(&dir.join("left_camera.json"))?,
            cam_r: read_camera(&dir.join("right_camera.json"))?,
        };
        let p = data.image_l.nrows();
        if data.image_l.dim() != (p, p) || data.image_r.dim() != (p, p) || data.wpm_l.dim() != (p, p) || data.wpm_r.dim() != (p, p) {
            return Err(CliError::Data(format!("{}: images and world-point maps must all be {p}x{p}", dir.display())));
        }
        let cfg = read_manifest(&dir.join("manifest.json"))?.config.scene;
        Ok(Self { dir: dir.to_path_buf(), data, cfg })
    }

    pub fn record_inputs(&self, run: &mut Run) -> Result<(), CliError> {
        for f in FILES {
            run.input(&self.dir.join(f))?;
        }
        Ok(())
    }

    pub fn pair_id(&self) -> String {
        self.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
    }
}
