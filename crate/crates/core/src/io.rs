//! File formats: PFM for scalar and vector maps, 8-bit PNG for masks,
//! JSON for configuration and ASCII PLY for meshes.
//!
//! PFM files are written little-endian (scale `-1`) with rows stored bottom to
//! top. Invalid pixels are stored as NaN and read back as invalid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::camera::{backproject, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::image::{Map, Mask, ScalarMap, VectorMap};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_pfm_raw(path: &Path, width: usize, height: usize, channels: usize, pixel: impl Fn(usize, usize, &mut [f32])) -> Result<()> {
    let mut w = create(path)?;
    let tag = if channels == 1 { "Pf" } else { "PF" };
    let mut buf = Vec::with_capacity(width * height * channels * 4 + 32);
    write!(buf, "{tag}\n{width} {height}\n-1.0\n").expect("write to Vec");
    let mut px = [0f32; 3];
    for y in (0..height).rev() {
        for x in 0..width {
            pixel(x, y, &mut px[..channels]);
            for v in &px[..channels] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct RawPfm {
    width: usize,
    height: usize,
    channels: usize,
    /// Row-major, top row first.
    data: Vec<f32>,
}

fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        let n = r.read(&mut b).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    if tok.is_empty() {
        return Err(Error::format(path, "truncated PFM header"));
    }
    String::from_utf8(tok).map_err(|_| Error::format(path, "non-ASCII PFM header"))
}

fn read_pfm_raw(path: &Path) -> Result<RawPfm> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let channels = match read_token(&mut r, path)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, format!("unknown PFM tag {other:?}"))),
    };
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad PFM {what} {s:?}")))
    };
    let width = parse(read_token(&mut r, path)?, "width")?;
    let height = parse(read_token(&mut r, path)?, "height")?;
    let scale_tok = read_token(&mut r, path)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format(path, format!("bad PFM scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, format!("expected {n} samples")))?;
    let mut data = vec![0f32; n];
    let row = width * channels;
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        // file rows run bottom to top
        let (fy, rest) = (i / row, i % row);
        data[(height - 1 - fy) * row + rest] = v;
    }
    Ok(RawPfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_scalar_pfm(path: impl AsRef<Path>, map: &ScalarMap) -> Result<()> {
    write_pfm_raw(path.as_ref(), map.width(), map.height(), 1, |x, y, px| {
        px[0] = match map.valid(x, y) {
            Some(&v) => v as f32,
            None => f32::NAN,
        };
    })
}

pub fn write_vector_pfm(path: impl AsRef<Path>, map: &VectorMap) -> Result<()> {
    write_pfm_raw(path.as_ref(), map.width(), map.height(), 3, |x, y, px| match map.valid(x, y) {
        Some(v) => {
            px[0] = v.x as f32;
            px[1] = v.y as f32;
            px[2] = v.z as f32;
        }
        None => px.fill(f32::NAN),
    })
}

/// The map a PFM write followed by a read would give: single precision,
/// invalid pixels zeroed.
pub fn stored_scalar(map: &ScalarMap) -> ScalarMap {
    let (w, h) = map.dims();
    ScalarMap::from_fn(w, h, 0.0, |x, y| {
        map.valid(x, y).map(|&v| v as f32).filter(|v| v.is_finite()).map(f64::from)
    })
}

/// Vector counterpart of [`stored_scalar`].
pub fn stored_vector(map: &VectorMap) -> VectorMap {
    let (w, h) = map.dims();
    VectorMap::from_fn(w, h, Vector3::zeros(), |x, y| {
        let v = map.valid(x, y)?.map(|c| c as f32);
        v.iter().all(|c| c.is_finite()).then(|| v.map(f64::from))
    })
}

pub fn read_scalar_pfm(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let raw = read_pfm_raw(path)?;
    if raw.channels != 1 {
        return Err(Error::format(path, "expected a single-channel PFM"));
    }
    let mask = raw.data.iter().map(|v| v.is_finite()).collect();
    let data = raw
        .data
        .iter()
        .map(|&v| if v.is_finite() { v as f64 } else { 0.0 })
        .collect();
    Map::from_parts(raw.width, raw.height, data, mask)
}

pub fn read_vector_pfm(path: impl AsRef<Path>) -> Result<VectorMap> {
    let path = path.as_ref();
    let raw = read_pfm_raw(path)?;
    if raw.channels != 3 {
        return Err(Error::format(path, "expected a three-channel PFM"));
    }
    let mut data = Vec::with_capacity(raw.width * raw.height);
    let mut mask = Vec::with_capacity(raw.width * raw.height);
    for c in raw.data.chunks_exact(3) {
        let ok = c.iter().all(|v| v.is_finite());
        mask.push(ok);
        data.push(if ok {
            Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)
        } else {
            Vector3::zeros()
        });
    }
    Map::from_parts(raw.width, raw.height, data, mask)
}

/// Writes a mask as an 8-bit greyscale PNG with values 0 and 255.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, buf)
        .expect("buffer sized to mask");
    let mut w = create(path)?;
    img.write_to(&mut w, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a greyscale PNG as a mask; any non-zero value is set.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Mask::from_vec(w as usize, h as usize, img.into_raw().into_iter().map(|v| v > 0).collect())
}

/// Reads an intensity image from PFM or greyscale PNG. PNG values are
/// normalised to `[0, 1]`.
pub fn read_intensity(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pfm") => read_scalar_pfm(path),
        Some("png") => {
            let img = image::open(path).map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?;
            // 8-bit sources are widened to the full 16-bit range
            let luma = img.into_luma16();
            let (w, h) = luma.dimensions();
            let data = luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Map::from_parts(w as usize, h as usize, data, vec![true; (w * h) as usize])
        }
        _ => Err(Error::format(path, "intensity images must be .pfm or .png")),
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the backprojected depth grid as an ASCII PLY triangle mesh. Each
/// grid cell whose corners are valid contributes two triangles; cells with
/// three valid corners contribute one.
pub fn write_depth_ply(path: impl AsRef<Path>, depth: &ScalarMap, cam: &CameraIntrinsics) -> Result<()> {
    let path = path.as_ref();
    let points = backproject(depth, cam);
    let (w, h) = depth.dims();
    let mut index = vec![usize::MAX; w * h];
    let mut verts = Vec::new();
    for (x, y, p) in points.iter_valid() {
        index[y * w + x] = verts.len();
        verts.push(*p);
    }
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let a = index[y * w + x];
            let b = index[y * w + x + 1];
            let c = index[(y + 1) * w + x];
            let d = index[(y + 1) * w + x + 1];
            let ok = |i: usize| i != usize::MAX;
            match (ok(a), ok(b), ok(c), ok(d)) {
                (true, true, true, true) => {
                    faces.push([a, c, b]);
                    faces.push([b, c, d]);
                }
                (true, true, true, false) => faces.push([a, c, b]),
                (true, true, false, true) => faces.push([a, d, b]),
                (true, false, true, true) => faces.push([a, c, d]),
                (false, true, true, true) => faces.push([b, c, d]),
                _ => {}
            }
        }
    }
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        verts.len(),
        faces.len()
    )
    .map_err(io)?;
    for p in &verts {
        writeln!(out, "{:.9} {:.9} {:.9}", p.x, p.y, p.z).map_err(io)?;
    }
    for f in &faces {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2]).map_err(io)?;
    }
    out.flush().map_err(io)
}
