//! On-disk posed depth datasets.
//!
//! Layout:
//!
//! ```text
//! <dir>/meta.json        intrinsics, image size, depth_scale (meters per unit), near, far
//! <dir>/poses.txt        "<index> m00 m01 ... m33" per line, row-major world-from-camera
//! <dir>/frames/NNNNNN.pgm 16-bit big-endian binary PGM, 0 = invalid
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::camera::{pose_from_matrix, quantize_depth};
use super::{CameraModel, DepthFrame, Pose};
use crate::io_util::{read, read_to_string, write_atomic};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
    pub near: f64,
    pub far: f64,
}

impl DatasetMeta {
    pub fn new(camera: &CameraModel, depth_scale: f64) -> Self {
        Self {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            depth_scale,
            near: camera.near,
            far: camera.far,
        }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{index:06}.pgm"))
}

/// Writes frames in the dataset layout. All frames must share one camera.
pub fn save_dataset(dir: &Path, frames: &[DepthFrame], depth_scale: f64) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyStream);
    };
    if !(depth_scale > 0.0) {
        return Err(Error::config("depth_scale", "must be positive"));
    }
    let meta = DatasetMeta::new(&first.camera, depth_scale);
    let mut poses = String::new();
    for f in frames {
        if f.camera != first.camera {
            return Err(Error::Frame {
                frame: f.index.to_string(),
                reason: "camera differs from the first frame".into(),
            });
        }
        let m = f.pose.to_homogeneous();
        write!(poses, "{}", f.index).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                write!(poses, " {}", m[(r, c)]).unwrap();
            }
        }
        poses.push('\n');
        write_atomic(&frame_path(dir, f.index), &encode_pgm16(f, depth_scale))?;
    }
    write_atomic(&dir.join("poses.txt"), poses.as_bytes())?;
    write_atomic(
        &dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

fn encode_pgm16(frame: &DepthFrame, depth_scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", frame.width(), frame.height()).into_bytes();
    out.reserve(frame.depth.len() * 2);
    for d in &frame.depth {
        out.extend_from_slice(&quantize_depth(*d, depth_scale).to_be_bytes());
    }
    out
}

fn decode_pgm16(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u16>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(format!("expected 16-bit PGM, maxval {maxval}"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h * 2 {
        return Err(format!("raster has {} bytes, expected {}", raster.len(), w * h * 2));
    }
    let data = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, data))
}

/// A dataset directory opened for reading. Iterating yields frames in index
/// order; problems with individual frames surface as per-frame errors.
pub struct Dataset {
    pub meta: DatasetMeta,
    dir: PathBuf,
    indices: Vec<usize>,
    poses: BTreeMap<usize, std::result::Result<Pose, String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn load_frame(&self, index: usize) -> Result<DepthFrame> {
        let path = frame_path(&self.dir, index);
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let frame_err = |reason: String| Error::Frame {
            frame: name.clone(),
            reason,
        };
        let pose = match self.poses.get(&index) {
            None => return Err(frame_err("no pose in poses.txt".into())),
            Some(Err(e)) => return Err(frame_err(e.clone())),
            Some(Ok(p)) => *p,
        };
        let bytes = read(&path).map_err(|e| frame_err(e.to_string()))?;
        let (w, h, raw) = decode_pgm16(&bytes).map_err(frame_err)?;
        let camera = self.meta.camera();
        if (w, h) != (camera.width, camera.height) {
            return Err(frame_err(format!(
                "image is {w}x{h}, meta.json says {}x{}",
                camera.width, camera.height
            )));
        }
        let scale = self.meta.depth_scale;
        let depth = raw
            .into_iter()
            .map(|u| (u != 0).then(|| u as f64 * scale))
            .collect();
        Ok(DepthFrame {
            depth,
            pose,
            camera,
            index,
        })
    }
}

impl IntoIterator for Dataset {
    type Item = Result<DepthFrame>;
    type IntoIter = Box<dyn Iterator<Item = Result<DepthFrame>>>;

    fn into_iter(self) -> Self::IntoIter {
        let indices = self.indices.clone();
        Box::new(indices.into_iter().map(move |i| self.load_frame(i)))
    }
}

/// Opens a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)?;
    meta.camera().validate()?;
    if !(meta.depth_scale > 0.0) {
        return Err(Error::config("meta.depth_scale", "must be positive"));
    }
    let mut poses = BTreeMap::new();
    for (lineno, line) in read_to_string(&dir.join("poses.txt"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let index: usize = it.next().unwrap().parse().map_err(|_| Error::Frame {
            frame: format!("poses.txt:{}", lineno + 1),
            reason: "bad frame index".into(),
        })?;
        let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse::<f64>).collect();
        let pose = match vals {
            Ok(v) if v.len() == 16 => {
                pose_from_matrix(&Matrix4::from_row_slice(&v)).map_err(|e| e.to_string())
            }
            Ok(v) => Err(format!("pose has {} values, expected 16", v.len())),
            Err(e) => Err(format!("malformed pose: {e}")),
        };
        poses.insert(index, pose);
    }
    let frames_dir = dir.join("frames");
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))? {
        let path = entry.map_err(|e| Error::io(&frames_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        if let Some(i) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    Ok(Dataset {
        meta,
        dir: dir.to_path_buf(),
        indices,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_trajectory, render_depth, RenderOptions, Scene, TrajectoryPolicy};

    fn frames(n: usize) -> Vec<DepthFrame> {
        let scene = Scene::demo_room();
        let cam = CameraModel::with_fov(32, 24, 70.0, 0.05, 8.0);
        let policy = TrajectoryPolicy::Orbit {
            center: [0.0, 0.0, 1.2],
            radius: 1.3,
            height: 0.3,
            start_deg: 0.0,
            sweep_deg: 360.0,
            target: None,
        };
        generate_trajectory(&scene, n, &policy, 0.1)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, p)| render_depth(&scene, p, &cam, i, &RenderOptions::default()).unwrap())
            .collect()
    }

    #[test]
    fn three_frames_in_order_and_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let fs = frames(3);
        save_dataset(dir.path(), &fs, 1e-3).unwrap();
        let loaded: Vec<_> = load_dataset(dir.path())
            .unwrap()
            .into_iter()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in fs.iter().zip(&loaded) {
            assert_eq!(b.index, a.index);
            assert_eq!(a.quantized(1e-3).depth, b.depth);
            assert_eq!(a.pose.to_homogeneous(), b.pose.to_homogeneous());
        }
        // saving what was loaded reproduces the files byte for byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded, 1e-3).unwrap();
        for name in ["poses.txt", "meta.json", "frames/000002.pgm"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn bad_pose_is_rejected_by_frame_name() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &frames(2), 1e-3).unwrap();
        let poses = std::fs::read_to_string(dir.path().join("poses.txt")).unwrap();
        let mut lines: Vec<String> = poses.lines().map(String::from).collect();
        let mut f: Vec<String> = lines[1].split(' ').map(String::from).collect();
        f[1] = "1.5".into();
        lines[1] = f.join(" ");
        std::fs::write(dir.path().join("poses.txt"), lines.join("\n")).unwrap();
        let results: Vec<_> = load_dataset(dir.path()).unwrap().into_iter().collect();
        assert!(results[0].is_ok());
        let err = results[1].as_ref().unwrap_err().to_string();
        assert!(err.contains("000001.pgm") && err.contains("orthonormal"), "{err}");
    }

    #[test]
    fn missing_pose_and_unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &frames(2), 1e-3).unwrap();
        let poses = std::fs::read_to_string(dir.path().join("poses.txt")).unwrap();
        std::fs::write(dir.path().join("poses.txt"), poses.lines().next().unwrap()).unwrap();
        let results: Vec<_> = load_dataset(dir.path()).unwrap().into_iter().collect();
        assert!(results[1].as_ref().unwrap_err().to_string().contains("no pose"));

        std::fs::write(dir.path().join("frames/000000.pgm"), b"P5\n2 2\n255\n....").unwrap();
        let results: Vec<_> = load_dataset(dir.path()).unwrap().into_iter().collect();
        assert!(results[0].as_ref().unwrap_err().to_string().contains("000000.pgm"));
    }
}
