//! Raw 8-bit volumes with JSON sidecars, and 8-bit grayscale PNG images, masks and label maps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{EnFaceImage, LayerMap, OctVolume, Pitches, RegionMask, LAYER_COUNT};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Full-scale value of the on-disk voxel type.
pub const STORAGE_MAX: f64 = 255.0;

/// JSON sidecar describing a raw voxel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub frames: usize,
    pub depth: usize,
    pub alines: usize,
    pub axial_pitch_um: f64,
    pub lateral_pitch_um: f64,
    pub frame_pitch_um: f64,
}

impl VolumeMeta {
    pub fn pitches(&self) -> Pitches {
        Pitches {
            axial_um: self.axial_pitch_um,
            lateral_um: self.lateral_pitch_um,
            frame_um: self.frame_pitch_um,
        }
    }
}

/// `scan.raw` pairs with `scan.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    write_atomic(path, text.as_bytes())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_volume<T: Scalar>(path: &Path) -> Result<OctVolume<T>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::Data(format!("missing sidecar {}", side.display())));
    }
    let meta: VolumeMeta = read_json(&side)?;
    let pitches = meta.pitches();
    pitches.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = meta.frames * meta.depth * meta.alines;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: sidecar dims {}x{}x{} need {expected} bytes, file has {}",
            path.display(),
            meta.depth,
            meta.alines,
            meta.frames,
            bytes.len()
        )));
    }
    let scale = T::lit(1.0 / STORAGE_MAX);
    let voxels = Array3::from_shape_vec(
        (meta.frames, meta.depth, meta.alines),
        bytes.into_iter().map(|b| T::from_u8(b).unwrap() * scale).collect(),
    )
    .map_err(|e| Error::Data(e.to_string()))?;
    OctVolume::new(voxels, pitches)
}

pub fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * STORAGE_MAX).round() as u8
}

pub fn save_volume<T: Scalar>(volume: &OctVolume<T>, path: &Path) -> Result<()> {
    let p = volume.pitches();
    let meta = VolumeMeta {
        frames: volume.frames(),
        depth: volume.depth(),
        alines: volume.alines(),
        axial_pitch_um: p.axial_um,
        lateral_pitch_um: p.lateral_um,
        frame_pitch_um: p.frame_um,
    };
    let bytes: Vec<u8> = volume.voxels().iter().map(|&v| quantize(v)).collect();
    write_atomic(path, &bytes)?;
    write_json(&sidecar_path(path), &meta)
}

fn to_gray(a: &Array2<u8>) -> GrayImage {
    let (h, w) = a.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([a[[y as usize, x as usize]]]))
}

pub fn write_png_u8(path: &Path, a: &Array2<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_gray(a).save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_png_u8(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0]))
}

/// Unit-range image stored as 8-bit grayscale.
pub fn write_image<T: Scalar>(path: &Path, img: &Array2<T>) -> Result<()> {
    write_png_u8(path, &img.mapv(quantize))
}

pub fn read_image<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let scale = T::lit(1.0 / STORAGE_MAX);
    Ok(read_png_u8(path)?.mapv(|b| T::from_u8(b).unwrap() * scale))
}

pub fn write_enface<T: Scalar>(path: &Path, img: &EnFaceImage<T>) -> Result<()> {
    write_image(path, img.pixels())
}

pub fn read_enface<T: Scalar>(path: &Path) -> Result<EnFaceImage<T>> {
    EnFaceImage::new(read_image(path)?)
}

/// Masks are stored as 0 / 255.
pub fn write_mask(path: &Path, mask: &RegionMask) -> Result<()> {
    write_png_u8(path, &mask.mask().mapv(|b| if b { 255 } else { 0 }))
}

pub fn read_mask(path: &Path) -> Result<RegionMask> {
    Ok(RegionMask::new(read_png_u8(path)?.mapv(|v| v >= 128)))
}

/// Label maps are stored with raw label values 0..=11.
pub fn write_layer_map(path: &Path, map: &LayerMap) -> Result<()> {
    write_png_u8(path, map.labels())
}

pub fn read_layer_map(path: &Path) -> Result<LayerMap> {
    let labels = read_png_u8(path)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= LAYER_COUNT) {
        return Err(Error::Data(format!("{}: label {bad} out of range", path.display())));
    }
    LayerMap::new(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8], meta: &VolumeMeta) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        fs::write(sidecar_path(&p), serde_json::to_string(meta).unwrap()).unwrap();
        p
    }

    fn meta(frames: usize, depth: usize, alines: usize) -> VolumeMeta {
        VolumeMeta {
            frames,
            depth,
            alines,
            axial_pitch_um: 3.0,
            lateral_pitch_um: 11.0,
            frame_pitch_um: 23.0,
        }
    }

    #[test]
    fn all_max_bytes_normalize_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(dir.path(), "v.raw", &[255u8; 64], &meta(4, 4, 4));
        let v: OctVolume<f32> = load_volume(&p).unwrap();
        assert!(v.voxels().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn full_scale_dims_give_frame_depth_aline_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = meta(256, 992, 512);
        let p = write_raw(dir.path(), "big.raw", &vec![0u8; 256 * 992 * 512], &m);
        let v: OctVolume<f32> = load_volume(&p).unwrap();
        assert_eq!(v.voxels().shape(), &[256, 992, 512]);
    }

    #[test]
    fn size_mismatch_missing_sidecar_and_bad_pitch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(dir.path(), "v.raw", &[0u8; 63], &meta(4, 4, 4));
        assert!(load_volume::<f32>(&p).is_err());
        let lone = dir.path().join("lone.raw");
        fs::write(&lone, [0u8; 8]).unwrap();
        let err = load_volume::<f32>(&lone).unwrap_err().to_string();
        assert!(err.contains("sidecar"), "{err}");
        let mut m = meta(2, 2, 2);
        m.frame_pitch_um = -1.0;
        let p = write_raw(dir.path(), "neg.raw", &[0u8; 8], &m);
        assert!(load_volume::<f32>(&p).is_err());
    }

    #[test]
    fn save_load_identity_up_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((3, 5, 7), |(f, r, c)| ((f * 35 + r * 7 + c) as f64 / 104.0).min(1.0));
        let vol = OctVolume::new(vox, Pitches::default()).unwrap();
        let p = dir.path().join("rt.raw");
        save_volume(&vol, &p).unwrap();
        let back: OctVolume<f64> = load_volume(&p).unwrap();
        for (a, b) in vol.voxels().iter().zip(back.voxels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.pitches(), vol.pitches());
        // quantized values survive exactly
        let p2 = dir.path().join("rt2.raw");
        save_volume(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn png_mask_and_label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = Array2::from_shape_fn((12, 5), |(r, _)| r as u8);
        let map = LayerMap::new(labels).unwrap();
        let p = dir.path().join("layers.png");
        write_layer_map(&p, &map).unwrap();
        assert_eq!(read_layer_map(&p).unwrap(), map);
        let mask = map.region(super::super::Layer::Choroid);
        let mp = dir.path().join("m.png");
        write_mask(&mp, &mask).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), mask);
    }
}
