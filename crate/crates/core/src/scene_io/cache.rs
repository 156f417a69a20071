//! Single-file binary cache: `b"OVSG"`, u32 format version, u32 artifact
//! kind, u64 payload length, payload. Everything little-endian.

use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix4, Point3, Vector3};

use super::{CameraView, DepthMap, Intrinsics, PointCloud, SceneBundle, SceneError, TriangleMesh};

pub const CACHE_MAGIC: &[u8; 4] = b"OVSG";
pub const CACHE_VERSION: u32 = 1;

/// What a cache file holds; checked on read so a stage never decodes
/// another stage's artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ArtifactKind {
    Scene = 1,
    Graph = 2,
    Visibility = 3,
    Features = 4,
    MergeCheckpoint = 5,
    Geometry = 6,
    FinalFeatures = 7,
}

#[derive(Default)]
pub struct CacheWriter {
    buf: Vec<u8>,
}

impl CacheWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.len(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.f64(*x);
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.len(v.len());
        for x in v {
            self.u32(*x);
        }
    }
}

pub struct CacheReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> SceneError {
    SceneError::CorruptCache(msg.into())
}

impl<'a> CacheReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SceneError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, SceneError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, SceneError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("invalid bool byte {b}"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// A length prefix, sanity-checked against the bytes remaining given
    /// the minimum encoded size of one element.
    pub fn len(&mut self, min_elem_size: usize) -> Result<usize, SceneError> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_elem_size as u64) > remaining {
            return Err(corrupt(format!("length {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }

    pub fn f32(&mut self) -> Result<f32, SceneError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], SceneError> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String, SceneError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, SceneError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>, SceneError> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Binary encoding of an artifact for the cache.
pub trait CacheCodec: Sized {
    const KIND: ArtifactKind;
    fn encode(&self, w: &mut CacheWriter);
    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError>;
}

pub fn write_cache_file<T: CacheCodec>(path: &Path, value: &T) -> Result<(), SceneError> {
    let mut payload = CacheWriter::new();
    value.encode(&mut payload);
    let payload = payload.into_bytes();
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::KIND as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    // write-then-rename so an interrupted run never leaves a truncated artifact
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache_file<T: CacheCodec>(path: &Path) -> Result<T, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let data = std::fs::read(path)?;
    let mut r = CacheReader::new(&data);
    if r.take(4)? != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(SceneError::VersionMismatch {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let kind = r.u32()?;
    if kind != T::KIND as u32 {
        return Err(corrupt(format!("expected artifact kind {:?}, found {kind}", T::KIND)));
    }
    let len = r.u64()?;
    let payload = r.take(len as usize)?;
    if !r.is_at_end() {
        return Err(corrupt("trailing bytes"));
    }
    let mut pr = CacheReader::new(payload);
    let value = T::decode(&mut pr)?;
    if !pr.is_at_end() {
        return Err(corrupt("payload not fully consumed"));
    }
    Ok(value)
}

pub(crate) fn put_point(w: &mut CacheWriter, p: &Point3<f64>) {
    w.f64(p.x);
    w.f64(p.y);
    w.f64(p.z);
}

pub(crate) fn get_point(r: &mut CacheReader<'_>) -> Result<Point3<f64>, SceneError> {
    Ok(Point3::new(r.f64()?, r.f64()?, r.f64()?))
}

pub(crate) fn put_vector(w: &mut CacheWriter, v: &Vector3<f64>) {
    w.f64(v.x);
    w.f64(v.y);
    w.f64(v.z);
}

pub(crate) fn get_vector(r: &mut CacheReader<'_>) -> Result<Vector3<f64>, SceneError> {
    Ok(Vector3::new(r.f64()?, r.f64()?, r.f64()?))
}

impl PointCloud {
    pub(crate) fn encode_into(&self, w: &mut CacheWriter) {
        w.len(self.len());
        for i in 0..self.len() {
            put_point(w, &self.positions[i]);
            w.buf.extend_from_slice(&self.colors[i]);
            put_vector(w, &self.normals[i]);
            w.bool(self.normal_valid[i]);
        }
    }

    pub(crate) fn decode_from(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let n = r.len(52)?;
        let mut c = PointCloud {
            positions: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            normals: Vec::with_capacity(n),
            normal_valid: Vec::with_capacity(n),
        };
        for _ in 0..n {
            c.positions.push(get_point(r)?);
            c.colors.push(r.array()?);
            c.normals.push(get_vector(r)?);
            c.normal_valid.push(r.bool()?);
        }
        Ok(c)
    }
}

fn encode_mesh(w: &mut CacheWriter, m: &TriangleMesh) {
    w.len(m.vertices.len());
    for v in &m.vertices {
        put_point(w, v);
    }
    w.len(m.triangles.len());
    for t in &m.triangles {
        t.iter().for_each(|i| w.u32(*i));
    }
    w.u32s(&m.vertex_to_point);
}

fn decode_mesh(r: &mut CacheReader<'_>) -> Result<TriangleMesh, SceneError> {
    let nv = r.len(24)?;
    let vertices = (0..nv).map(|_| get_point(r)).collect::<Result<_, _>>()?;
    let nt = r.len(12)?;
    let triangles = (0..nt)
        .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?]))
        .collect::<Result<_, SceneError>>()?;
    let vertex_to_point = r.u32s()?;
    Ok(TriangleMesh {
        vertices,
        triangles,
        vertex_to_point,
    })
}

fn encode_view(w: &mut CacheWriter, v: &CameraView) {
    w.str(&v.view_id);
    let k = &v.intrinsics;
    for x in [k.fx, k.fy, k.cx, k.cy] {
        w.f64(x);
    }
    w.u32(k.width);
    w.u32(k.height);
    // row-major, same as the manifest
    for row in 0..4 {
        for col in 0..4 {
            w.f64(v.cam_to_world[(row, col)]);
        }
    }
    w.bytes(v.rgb.as_raw());
    w.len(v.depth.data.len());
    for d in &v.depth.data {
        w.f32(*d);
    }
}

fn decode_view(r: &mut CacheReader<'_>) -> Result<CameraView, SceneError> {
    let id = r.str()?;
    let k = Intrinsics {
        fx: r.f64()?,
        fy: r.f64()?,
        cx: r.f64()?,
        cy: r.f64()?,
        width: r.u32()?,
        height: r.u32()?,
    };
    let mut pose = [0.0; 16];
    for x in pose.iter_mut() {
        *x = r.f64()?;
    }
    let pose = Matrix4::from_row_slice(&pose);
    let rgb = RgbImage::from_raw(k.width, k.height, r.bytes()?.to_vec())
        .ok_or_else(|| corrupt("rgb buffer size"))?;
    let nd = r.len(4)?;
    let depth: Vec<f32> = (0..nd).map(|_| r.f32()).collect::<Result<_, _>>()?;
    if nd != k.width as usize * k.height as usize {
        return Err(corrupt("depth buffer size"));
    }
    CameraView::new(id, k, pose, rgb, DepthMap::new(k.width, k.height, depth))
}

impl CacheCodec for SceneBundle {
    const KIND: ArtifactKind = ArtifactKind::Scene;

    fn encode(&self, w: &mut CacheWriter) {
        w.f64(self.voxel_size);
        self.cloud.encode_into(w);
        match &self.mesh {
            None => w.bool(false),
            Some(m) => {
                w.bool(true);
                encode_mesh(w, m);
            }
        }
        w.len(self.views.len());
        for v in &self.views {
            encode_view(w, v);
        }
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let voxel_size = r.f64()?;
        let cloud = PointCloud::decode_from(r)?;
        let mesh = if r.bool()? { Some(decode_mesh(r)?) } else { None };
        let nv = r.len(1)?;
        let views = (0..nv).map(|_| decode_view(r)).collect::<Result<_, _>>()?;
        Ok(SceneBundle {
            cloud,
            mesh,
            views,
            voxel_size,
        })
    }
}

/// Cloud and mesh of a scene without its views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub cloud: PointCloud,
    pub mesh: Option<TriangleMesh>,
    pub voxel_size: f64,
}

impl CacheCodec for SceneGeometry {
    const KIND: ArtifactKind = ArtifactKind::Geometry;

    fn encode(&self, w: &mut CacheWriter) {
        w.f64(self.voxel_size);
        self.cloud.encode_into(w);
        match &self.mesh {
            None => w.bool(false),
            Some(m) => {
                w.bool(true);
                encode_mesh(w, m);
            }
        }
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let voxel_size = r.f64()?;
        let cloud = PointCloud::decode_from(r)?;
        let mesh = if r.bool()? { Some(decode_mesh(r)?) } else { None };
        Ok(SceneGeometry {
            cloud,
            mesh,
            voxel_size,
        })
    }
}

pub fn save_scene_cache(bundle: &SceneBundle, path: &Path) -> Result<(), SceneError> {
    write_cache_file(path, bundle)
}

pub fn load_scene_cache(path: &Path) -> Result<SceneBundle, SceneError> {
    read_cache_file(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_bundle() -> SceneBundle {
        let cloud = PointCloud::new(
            vec![Point3::new(0.1, 0.2, 0.3), Point3::new(1.0 / 3.0, -2.5, 1e-300)],
            vec![[1, 2, 3], [4, 5, 6]],
            Some(vec![Vector3::z(), Vector3::zeros()]),
        )
        .unwrap();
        let mesh = TriangleMesh {
            vertices: vec![Point3::origin(); 3],
            triangles: vec![[0, 1, 2]],
            vertex_to_point: vec![0, 1, 1],
        };
        let k = Intrinsics {
            fx: 10.0,
            fy: 11.0,
            cx: 2.0,
            cy: 1.5,
            width: 4,
            height: 3,
        };
        let mut rgb = RgbImage::new(4, 3);
        rgb.put_pixel(1, 2, image::Rgb([9, 8, 7]));
        let view = CameraView::new(
            "v0",
            k,
            Matrix4::new_translation(&Vector3::new(0.5, 0.25, -1.0)),
            rgb,
            DepthMap::new(4, 3, (0..12).map(|i| i as f32 * 0.25).collect()),
        )
        .unwrap();
        SceneBundle {
            cloud,
            mesh: Some(mesh),
            views: vec![view],
            voxel_size: 0.005,
        }
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ovsg");
        let b = small_bundle();
        save_scene_cache(&b, &path).unwrap();
        assert_eq!(load_scene_cache(&path).unwrap(), b);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"OVSG");
    }

    #[test]
    fn wrong_version_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ovsg");
        save_scene_cache(&small_bundle(), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(
            load_scene_cache(&path),
            Err(SceneError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ovsg");
        save_scene_cache(&small_bundle(), &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 5]).unwrap();
        assert!(matches!(load_scene_cache(&path), Err(SceneError::CorruptCache(_))));
    }

    #[test]
    fn million_point_positions_bitwise_equal() {
        let n = 1_000_000;
        let positions: Vec<Point3<f64>> = (0..n)
            .map(|i| {
                let f = i as f64;
                Point3::new(f.sin() * 1e3, (f * 1e-7).exp(), f64::from_bits(0x3ff0_0000_0000_0000 + i as u64))
            })
            .collect();
        let cloud = PointCloud::new(positions, vec![[7, 7, 7]; n], None).unwrap();
        let b = SceneBundle {
            cloud,
            mesh: None,
            views: vec![],
            voxel_size: 0.005,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.ovsg");
        save_scene_cache(&b, &path).unwrap();
        let back = load_scene_cache(&path).unwrap();
        let same = b
            .cloud
            .positions
            .iter()
            .zip(&back.cloud.positions)
            .all(|(a, c)| a.coords.iter().zip(c.coords.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(same);
        assert_eq!(back.cloud.len(), n);
    }

    proptest! {
        #[test]
        fn cloud_roundtrip_is_bit_exact(
            pts in prop::collection::vec((any::<f64>(), any::<f64>(), any::<f64>(), any::<[u8; 3]>()), 0..64)
        ) {
            let cloud = PointCloud {
                positions: pts.iter().map(|p| Point3::new(p.0, p.1, p.2)).collect(),
                colors: pts.iter().map(|p| p.3).collect(),
                normals: vec![Vector3::zeros(); pts.len()],
                normal_valid: vec![false; pts.len()],
            };
            let mut w = CacheWriter::new();
            cloud.encode_into(&mut w);
            let bytes = w.into_bytes();
            let back = PointCloud::decode_from(&mut CacheReader::new(&bytes)).unwrap();
            for (a, b) in cloud.positions.iter().zip(&back.positions) {
                for (x, y) in a.coords.iter().zip(b.coords.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(cloud.colors, back.colors);
        }
    }
}
