//! Dataset and artifact formats: PNG images, PFM float depths (NaN =
//! invalid), poses.txt / intrinsics.txt, flat key=value configs, ASCII PLY
//! export, and the versioned binary checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::anchors::{AnchorSet, DepthMap, TrainingView};
use crate::decoder::{ColorMode, DecoderBank, Mlp2};
use crate::error::{Error, Result};
use crate::img::ImageRgb;
use crate::rasterize::RasterConfig;
use crate::scene::{quat_norm, Anchor, Camera, PerViewGroup, Pose};
use crate::train::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PNG color images (8-bit, values clamped to [0,1] and quantized).

pub fn write_png(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut buf = Vec::with_capacity(img.width * img.height * 3);
    for p in &img.data {
        for ch in 0..3 {
            buf.push((p[ch].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_png(path: &Path) -> Result<ImageRgb> {
    let dyn_img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = dyn_img.to_rgb8();
    let mut img = ImageRgb::new(rgb.width() as usize, rgb.height() as usize);
    for (i, px) in rgb.pixels().enumerate() {
        img.data[i] = Vector3::new(
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        );
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// PFM depth maps: grayscale "Pf", little-endian (negative scale), scanlines
// bottom-to-top per the format's convention. NaN marks invalid pixels.

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height)?;
        for y in (0..depth.height).rev() {
            for x in 0..depth.width {
                let v = depth.values[y * depth.width + x] as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    // Header: three whitespace-terminated tokens after the magic line.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "truncated header".into(),
            });
        }
        pos += 1; // consume the single terminating whitespace byte
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };
    if token(&bytes)? != "Pf" {
        return Err(fmt_err("not a grayscale PFM (expected magic 'Pf')"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| fmt_err("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| fmt_err("bad height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| fmt_err("bad scale"))?;
    if scale >= 0.0 {
        return Err(fmt_err("big-endian PFM not supported (scale must be negative)"));
    }
    let need = width * height * 4;
    if bytes.len() < pos + need {
        return Err(fmt_err("truncated pixel data"));
    }
    let mut depth = DepthMap::new(width, height);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            depth.values[y * width + x] = v as f64;
            off += 4;
        }
    }
    Ok(depth)
}

// ---------------------------------------------------------------------------
// Poses: one line per view, `idx tx ty tz qw qx qy qz`, camera-to-world.

pub fn write_poses(path: &Path, cam_to_world: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for (i, p) in cam_to_world.iter().enumerate() {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            i, p.t.x, p.t.y, p.t.z, p.rot[0], p.rot[1], p.rot[2], p.rot[3]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses camera-to-world poses, normalizing quaternions (warning on stderr
/// above 1e-3 norm deviation). Indices must be contiguous from 0.
pub fn parse_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse(format!("expected 8 fields, got {}", fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| parse(format!("bad index '{}'", fields[0])))?;
        if idx != poses.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("non-contiguous pose index {idx} (expected {})", poses.len()),
            });
        }
        let mut nums = [0.0f64; 7];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| parse(format!("bad number '{f}'")))?;
        }
        let q = [nums[3], nums[4], nums[5], nums[6]];
        let n = quat_norm(&q);
        if n == 0.0 || !n.is_finite() {
            return Err(parse("degenerate quaternion".into()));
        }
        if (n - 1.0).abs() > 1e-3 {
            eprintln!(
                "warning: {}:{} quaternion norm {n:.6} far from 1; normalizing",
                path.display(),
                lineno + 1
            );
        }
        poses.push(Pose::new(
            [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
            Vector3::new(nums[0], nums[1], nums[2]),
        ));
    }
    Ok(poses)
}

// ---------------------------------------------------------------------------
// Intrinsics: single line `fx fy cx cy width height`, one shared camera.

pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub fn write_intrinsics(path: &Path, i: &Intrinsics) -> Result<()> {
    fs::write(
        path,
        format!("{} {} {} {} {} {}\n", i.fx, i.fy, i.cx, i.cy, i.width, i.height),
    )
    .map_err(|e| Error::io(path, e))
}

pub fn parse_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = read_to_string(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "empty intrinsics file".into(),
        })?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected 6 fields, got {}", fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64> {
        fields[i].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad number '{}'", fields[i]),
        })
    };
    Ok(Intrinsics {
        fx: num(0)?,
        fy: num(1)?,
        cx: num(2)?,
        cy: num(3)?,
        width: num(4)? as usize,
        height: num(5)? as usize,
    })
}

// ---------------------------------------------------------------------------
// Dataset layout: images/NNNNN.png, depth/NNNNN.pfm, poses.txt,
// intrinsics.txt; an optional eval/ subdirectory repeats the layout.

pub fn write_dataset(root: &Path, views: &[TrainingView]) -> Result<()> {
    let img_dir = root.join("images");
    let depth_dir = root.join("depth");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let mut poses = Vec::new();
    for (i, v) in views.iter().enumerate() {
        write_png(&img_dir.join(format!("{i:05}.png")), &v.image)?;
        write_pfm(&depth_dir.join(format!("{i:05}.pfm")), &v.depth)?;
        poses.push(v.cam_to_world);
    }
    write_poses(&root.join("poses.txt"), &poses)?;
    let c = &views[0].cam;
    write_intrinsics(
        &root.join("intrinsics.txt"),
        &Intrinsics {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        },
    )
}

pub fn load_dataset(root: &Path) -> Result<Vec<TrainingView>> {
    let intr = parse_intrinsics(&root.join("intrinsics.txt"))?;
    let poses = parse_poses(&root.join("poses.txt"))?;
    if poses.is_empty() {
        return Err(Error::Config(format!(
            "no views found in {}",
            root.display()
        )));
    }
    let mut views = Vec::with_capacity(poses.len());
    for (i, c2w) in poses.iter().enumerate() {
        let image = read_png(&root.join("images").join(format!("{i:05}.png")))?;
        let depth = read_pfm(&root.join("depth").join(format!("{i:05}.pfm")))?;
        let cam = Camera::new(
            intr.fx,
            intr.fy,
            intr.cx,
            intr.cy,
            intr.width,
            intr.height,
            c2w.inverse(),
        )?;
        views.push(TrainingView::new(cam, image, depth)?);
    }
    Ok(views)
}

// ---------------------------------------------------------------------------
// Flat key=value config files ('#' comments, later keys win).

pub fn parse_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_to_string(path)?;
    parse_config_str(&text, path)
}

pub fn parse_config_str(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn write_config(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoint: little-endian binary, versioned header. Holds everything
// learnable plus the anchor set, so a checkpoint alone can render.

struct Bin(Vec<u8>);

impl Bin {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vector3<f64>) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.f64(*v);
        }
    }
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: std::path::PathBuf,
}

impl<'a> BinReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_mlp(b: &mut Bin, m: &Mlp2) {
    b.u32(m.in_dim as u32);
    b.u32(m.hidden as u32);
    b.u32(m.out_dim as u32);
    b.f64s(&m.w1);
    b.f64s(&m.b1);
    b.f64s(&m.w2);
    b.f64s(&m.b2);
}

fn read_mlp(r: &mut BinReader) -> Result<Mlp2> {
    Ok(Mlp2 {
        in_dim: r.u32()? as usize,
        hidden: r.u32()? as usize,
        out_dim: r.u32()? as usize,
        w1: r.f64s()?,
        b1: r.f64s()?,
        w2: r.f64s()?,
        b2: r.f64s()?,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut b = Bin(Vec::new());
    b.0.extend_from_slice(CHECKPOINT_MAGIC);
    b.u32(CHECKPOINT_VERSION);
    b.u32(model.bank.k as u32);
    b.f64(model.bank.offset_bound);
    b.u32(match model.bank.color_mode {
        ColorMode::Residual => 0,
        ColorMode::Direct => 1,
    });
    for head in model.bank.heads() {
        write_mlp(&mut b, head);
    }
    b.vec3(&model.background);
    b.f64(model.anchors.voxel_resolution);
    b.u32(model.anchors.anchors.len() as u32);
    for a in &model.anchors.anchors {
        b.vec3(&a.position_cam);
        b.u32(a.view_id as u32);
        b.f64s(&a.feature);
        b.vec3(&a.nominal_mu);
        b.vec3(&a.nominal_color);
        b.f64(a.nominal_opacity);
        b.vec3(&a.nominal_scale);
    }
    b.u32(model.anchors.groups.len() as u32);
    for g in &model.anchors.groups {
        b.u32(g.view_id as u32);
        b.u32(g.anchor_ids.len() as u32);
        for id in &g.anchor_ids {
            b.u32(*id as u32);
        }
        for c in 0..4 {
            b.f64(g.cam_to_world.rot[c]);
        }
        b.vec3(&g.cam_to_world.t);
        b.f64(g.log_s);
        b.f64(g.log_lambda);
    }
    fs::write(path, b.0).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader {
        buf: &buf,
        pos: 0,
        path: path.to_path_buf(),
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: r.path,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: r.path,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let k = r.u32()? as usize;
    let offset_bound = r.f64()?;
    let color_mode = match r.u32()? {
        0 => ColorMode::Residual,
        1 => ColorMode::Direct,
        m => {
            return Err(Error::Format {
                path: r.path,
                msg: format!("unknown color mode {m}"),
            })
        }
    };
    let heads: Vec<Mlp2> = (0..5).map(|_| read_mlp(&mut r)).collect::<Result<_>>()?;
    let [f_mu, f_o, f_c, f_s, f_r]: [Mlp2; 5] = heads.try_into().unwrap();
    let bank = DecoderBank {
        f_mu,
        f_o,
        f_c,
        f_s,
        f_r,
        k,
        offset_bound,
        color_mode,
    };
    let background = r.vec3()?;
    let voxel_resolution = r.f64()?;
    let n_anchors = r.u32()? as usize;
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        anchors.push(Anchor {
            position_cam: r.vec3()?,
            view_id: r.u32()? as usize,
            feature: r.f64s()?,
            nominal_mu: r.vec3()?,
            nominal_color: r.vec3()?,
            nominal_opacity: r.f64()?,
            nominal_scale: r.vec3()?,
        });
    }
    let n_groups = r.u32()? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let view_id = r.u32()? as usize;
        let n_ids = r.u32()? as usize;
        let anchor_ids = (0..n_ids)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let rot = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let t = r.vec3()?;
        groups.push(PerViewGroup {
            view_id,
            anchor_ids,
            cam_to_world: Pose::new(rot, t),
            log_s: r.f64()?,
            log_lambda: r.f64()?,
        });
    }
    Ok(Model {
        anchors: AnchorSet {
            anchors,
            groups,
            voxel_resolution,
        },
        bank,
        raster: RasterConfig::default(),
        background,
    })
}

// ---------------------------------------------------------------------------
// ASCII PLY export.

fn ply_color_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn fmt_f(v: f64) -> String {
    // Trim trailing zeros so `1.0` prints as `1`.
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn export_anchors_ply(path: &Path, anchors: &[Anchor]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", anchors.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for a in anchors {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            fmt_f(a.nominal_mu.x),
            fmt_f(a.nominal_mu.y),
            fmt_f(a.nominal_mu.z),
            ply_color_byte(a.nominal_color.x),
            ply_color_byte(a.nominal_color.y),
            ply_color_byte(a.nominal_color.z),
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_splats_ply(path: &Path, splats: &[crate::scene::GaussianSplat]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", splats.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("property float opacity\n");
    out.push_str("property float scale_x\nproperty float scale_y\nproperty float scale_z\n");
    out.push_str("end_header\n");
    for s in splats {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            fmt_f(s.mu.x),
            fmt_f(s.mu.y),
            fmt_f(s.mu.z),
            ply_color_byte(s.color.x),
            ply_color_byte(s.color.y),
            ply_color_byte(s.color.z),
            fmt_f(s.opacity),
            fmt_f(s.scale.x),
            fmt_f(s.scale.y),
            fmt_f(s.scale.z),
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
