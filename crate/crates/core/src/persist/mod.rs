//! Checkpoint container: explicit little-endian binary sections behind a
//! magic/version header and a trailing SHA-256-derived checksum. The layout
//! is described in `FORMAT.md` at the crate root.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::network::{NetworkConfig, NetworkWeights};
use crate::problems::{ConvexPolygon, Ellipse, Family, FourierSeries, InstanceSpec, LaplaceDomain};
use crate::training::{LatentBank, Manifest, PretrainedModel};
use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"MADROM\x00\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PersistError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("file holds a {found:?} object, expected {expected:?}")]
    Kind { found: u32, expected: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("refusing to save non-finite {0}")]
    NonFinite(&'static str),
}

/// Object kinds stored after the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Model = 1,
    Bank = 2,
    Instances = 3,
    Weights = 4,
}

mod tag {
    pub const NETWORK_CONFIG: u32 = 1;
    pub const WEIGHTS: u32 = 2;
    pub const BANK: u32 = 3;
    pub const FAMILY: u32 = 4;
    pub const INSTANCES: u32 = 5;
    pub const MANIFEST: u32 = 6;
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64, what: &'static str) -> Result<()> {
        if !v.is_finite() {
            return Err(PersistError::NonFinite(what).into());
        }
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64], what: &'static str) -> Result<()> {
        self.u64(vs.len() as u64);
        vs.iter().try_for_each(|&v| self.f64(v, what))
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(PersistError::Truncated)?;
        if end > self.buf.len() {
            return Err(PersistError::Truncated.into());
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every counted item is at least one byte
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(PersistError::Truncated.into());
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn malformed(m: impl Into<String>) -> Error {
    PersistError::Malformed(m.into()).into()
}

/// Header, sections and checksum trailer around the encoded sections.
fn frame(kind: Kind, sections: &[(u32, Vec<u8>)]) -> Vec<u8> {
    let mut e = Enc::default();
    e.buf.extend_from_slice(&MAGIC);
    e.u32(VERSION);
    e.u32(kind as u32);
    for (t, payload) in sections {
        e.u32(*t);
        e.u64(payload.len() as u64);
        e.buf.extend_from_slice(payload);
    }
    let c = checksum(&e.buf);
    e.u64(c);
    e.buf
}

/// Validates framing and returns the sections in file order.
fn unframe(bytes: &[u8], expected: Kind) -> Result<Vec<(u32, &[u8])>> {
    if bytes.len() < MAGIC.len() + 4 || bytes[..8] != MAGIC {
        return Err(PersistError::BadMagic.into());
    }
    let mut d = Dec::new(bytes);
    d.take(8)?;
    let version = d.u32()?;
    if version != VERSION {
        return Err(PersistError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    if bytes.len() < 8 + 4 + 4 + 8 {
        return Err(PersistError::Truncated.into());
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed }.into());
    }
    let mut d = Dec::new(body);
    d.take(12)?;
    let kind = d.u32()?;
    if kind != expected as u32 {
        return Err(PersistError::Kind {
            found: kind,
            expected: expected as u32,
        }
        .into());
    }
    let mut out = Vec::new();
    while !d.done() {
        let t = d.u32()?;
        let n = d.u64()?;
        let n = usize::try_from(n).map_err(|_| PersistError::Truncated)?;
        out.push((t, d.take(n)?));
    }
    Ok(out)
}

fn section<'a>(sections: &[(u32, &'a [u8])], t: u32) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(tt, _)| *tt == t)
        .map(|(_, p)| *p)
        .ok_or_else(|| malformed(format!("missing section {t}")))
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| malformed(e.to_string()))
}

fn from_json<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| malformed(e.to_string()))
}

fn enc_weights(w: &NetworkWeights) -> Result<Vec<u8>> {
    let mut e = Enc::default();
    e.f64s(&w.flatten(), "weight")?;
    Ok(e.buf)
}

fn dec_weights(config: &NetworkConfig, b: &[u8]) -> Result<NetworkWeights> {
    let mut d = Dec::new(b);
    let flat = d.f64s()?;
    if !d.done() {
        return Err(malformed("trailing bytes in weights"));
    }
    NetworkWeights::from_flat(config, &flat)
}

fn enc_bank(bank: &LatentBank) -> Result<Vec<u8>> {
    let mut e = Enc::default();
    e.u64(bank.latents.len() as u64);
    e.u64(bank.dim as u64);
    for z in &bank.latents {
        if z.len() != bank.dim {
            return Err(Error::Shape("latent length differs from bank dimension".into()));
        }
        for &v in z {
            e.f64(v, "latent")?;
        }
    }
    match &bank.descriptors {
        None => e.u8(0),
        Some(ds) => {
            e.u8(1);
            if ds.len() != bank.latents.len() {
                return Err(Error::Shape("one descriptor per latent".into()));
            }
            for dsc in ds {
                e.f64s(dsc, "descriptor")?;
            }
        }
    }
    Ok(e.buf)
}

fn dec_bank(b: &[u8]) -> Result<LatentBank> {
    let mut d = Dec::new(b);
    let count = d.u64()? as usize;
    let dim = d.u64()? as usize;
    let total = count.checked_mul(dim).ok_or(PersistError::Truncated)?;
    if total.checked_mul(8).is_none_or(|n| n > b.len()) {
        return Err(PersistError::Truncated.into());
    }
    let mut latents = Vec::with_capacity(count);
    for _ in 0..count {
        latents.push((0..dim).map(|_| d.f64()).collect::<Result<Vec<_>>>()?);
    }
    let descriptors = match d.u8()? {
        0 => None,
        1 => Some((0..count).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?),
        x => return Err(malformed(format!("descriptor flag {x}"))),
    };
    if !d.done() {
        return Err(malformed("trailing bytes in bank"));
    }
    Ok(LatentBank { dim, latents, descriptors })
}

fn enc_series(e: &mut Enc, s: &FourierSeries) -> Result<()> {
    if s.cos.len() != s.sin.len() {
        return Err(Error::Shape("Fourier series cos/sin lengths differ".into()));
    }
    e.f64(s.period, "period")?;
    e.f64(s.a0, "coefficient")?;
    e.f64s(&s.cos, "coefficient")?;
    e.f64s(&s.sin, "coefficient")
}

fn dec_series(d: &mut Dec) -> Result<FourierSeries> {
    let period = d.f64()?;
    let a0 = d.f64()?;
    let cos = d.f64s()?;
    let sin = d.f64s()?;
    if cos.len() != sin.len() {
        return Err(malformed("Fourier series cos/sin lengths differ"));
    }
    Ok(FourierSeries { period, a0, cos, sin })
}

fn enc_instances(specs: &[InstanceSpec]) -> Result<Vec<u8>> {
    let mut e = Enc::default();
    e.u64(specs.len() as u64);
    for s in specs {
        match s {
            InstanceSpec::Ode { eta } => {
                e.u8(0);
                e.f64(*eta, "eta")?;
            }
            InstanceSpec::Burgers { u0, nu, heterogeneous } => {
                e.u8(1);
                e.f64(*nu, "viscosity")?;
                e.u8(*heterogeneous as u8);
                enc_series(&mut e, u0)?;
            }
            InstanceSpec::Laplace { domain, h } => {
                e.u8(2);
                match domain {
                    LaplaceDomain::Polygon(p) => {
                        e.u8(0);
                        e.u64(p.vertices.len() as u64);
                        for v in &p.vertices {
                            e.f64(v[0], "vertex")?;
                            e.f64(v[1], "vertex")?;
                        }
                    }
                    LaplaceDomain::Ellipse(el) => {
                        e.u8(1);
                        for v in [el.center[0], el.center[1], el.semi_axes[0], el.semi_axes[1], el.rotation] {
                            e.f64(v, "ellipse")?;
                        }
                    }
                }
                enc_series(&mut e, h)?;
            }
        }
    }
    Ok(e.buf)
}

fn dec_instances(b: &[u8]) -> Result<Vec<InstanceSpec>> {
    let mut d = Dec::new(b);
    let n = d.len()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = match d.u8()? {
            0 => InstanceSpec::Ode { eta: d.f64()? },
            1 => {
                let nu = d.f64()?;
                let heterogeneous = match d.u8()? {
                    0 => false,
                    1 => true,
                    x => return Err(malformed(format!("bool flag {x}"))),
                };
                let u0 = dec_series(&mut d)?;
                InstanceSpec::Burgers { u0, nu, heterogeneous }
            }
            2 => {
                let domain = match d.u8()? {
                    0 => {
                        let k = d.len()?;
                        let vertices = (0..k).map(|_| Ok([d.f64()?, d.f64()?])).collect::<Result<Vec<_>>>()?;
                        LaplaceDomain::Polygon(ConvexPolygon { vertices })
                    }
                    1 => {
                        let v: Vec<f64> = (0..5).map(|_| d.f64()).collect::<Result<_>>()?;
                        LaplaceDomain::Ellipse(Ellipse {
                            center: [v[0], v[1]],
                            semi_axes: [v[2], v[3]],
                            rotation: v[4],
                        })
                    }
                    x => return Err(malformed(format!("domain tag {x}"))),
                };
                let h = dec_series(&mut d)?;
                InstanceSpec::Laplace { domain, h }
            }
            x => return Err(malformed(format!("family tag {x}"))),
        };
        out.push(spec);
    }
    if !d.done() {
        return Err(malformed("trailing bytes in instances"));
    }
    Ok(out)
}

fn family_code(f: Family) -> u8 {
    match f {
        Family::Ode => 0,
        Family::Burgers => 1,
        Family::Laplace => 2,
    }
}

fn family_from(code: u8) -> Result<Family> {
    match code {
        0 => Ok(Family::Ode),
        1 => Ok(Family::Burgers),
        2 => Ok(Family::Laplace),
        x => Err(malformed(format!("family code {x}"))),
    }
}

pub fn encode_model(m: &PretrainedModel) -> Result<Vec<u8>> {
    if m.bank.len() != m.instances.len() {
        return Err(Error::Shape("bank size must equal the number of instances".into()));
    }
    Ok(frame(
        Kind::Model,
        &[
            (tag::NETWORK_CONFIG, json(&m.weights.config)?),
            (tag::WEIGHTS, enc_weights(&m.weights)?),
            (tag::BANK, enc_bank(&m.bank)?),
            (tag::FAMILY, vec![family_code(m.family)]),
            (tag::INSTANCES, enc_instances(&m.instances)?),
            (tag::MANIFEST, json(&m.manifest)?),
        ],
    ))
}

pub fn decode_model(bytes: &[u8]) -> Result<PretrainedModel> {
    let s = unframe(bytes, Kind::Model)?;
    let config: NetworkConfig = from_json(section(&s, tag::NETWORK_CONFIG)?)?;
    let weights = dec_weights(&config, section(&s, tag::WEIGHTS)?)?;
    let bank = dec_bank(section(&s, tag::BANK)?)?;
    let fam = section(&s, tag::FAMILY)?;
    if fam.len() != 1 {
        return Err(malformed("family section must be one byte"));
    }
    let family = family_from(fam[0])?;
    let instances = dec_instances(section(&s, tag::INSTANCES)?)?;
    let manifest: Manifest = from_json(section(&s, tag::MANIFEST)?)?;
    if bank.len() != instances.len() {
        return Err(malformed("bank size differs from instance count"));
    }
    Ok(PretrainedModel {
        weights,
        bank,
        family,
        instances,
        manifest,
    })
}

pub fn encode_bank(bank: &LatentBank) -> Result<Vec<u8>> {
    Ok(frame(Kind::Bank, &[(tag::BANK, enc_bank(bank)?)]))
}

pub fn decode_bank(bytes: &[u8]) -> Result<LatentBank> {
    dec_bank(section(&unframe(bytes, Kind::Bank)?, tag::BANK)?)
}

pub fn encode_instances(specs: &[InstanceSpec]) -> Result<Vec<u8>> {
    Ok(frame(Kind::Instances, &[(tag::INSTANCES, enc_instances(specs)?)]))
}

pub fn decode_instances(bytes: &[u8]) -> Result<Vec<InstanceSpec>> {
    dec_instances(section(&unframe(bytes, Kind::Instances)?, tag::INSTANCES)?)
}

pub fn encode_weights(w: &NetworkWeights) -> Result<Vec<u8>> {
    Ok(frame(
        Kind::Weights,
        &[(tag::NETWORK_CONFIG, json(&w.config)?), (tag::WEIGHTS, enc_weights(w)?)],
    ))
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights> {
    let s = unframe(bytes, Kind::Weights)?;
    let config: NetworkConfig = from_json(section(&s, tag::NETWORK_CONFIG)?)?;
    dec_weights(&config, section(&s, tag::WEIGHTS)?)
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_model(m: &PretrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(m)?)
}

pub fn load_model(path: &Path) -> Result<PretrainedModel> {
    decode_model(&fs::read(path)?)
}

pub fn save_bank(b: &LatentBank, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bank(b)?)
}

pub fn load_bank(path: &Path) -> Result<LatentBank> {
    decode_bank(&fs::read(path)?)
}

pub fn save_instances(s: &[InstanceSpec], path: &Path) -> Result<()> {
    write_atomic(path, &encode_instances(s)?)
}

pub fn load_instances(path: &Path) -> Result<Vec<InstanceSpec>> {
    decode_instances(&fs::read(path)?)
}

pub fn save_weights(w: &NetworkWeights, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(w)?)
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_weights;
    use crate::training::{RunStatus, TrainConfig};

    fn model() -> PretrainedModel {
        let cfg = NetworkConfig {
            depth: 3,
            width: 4,
            spatial_dim: 1,
            latent_dim: 2,
            ..NetworkConfig::default()
        };
        PretrainedModel {
            weights: init_weights(&cfg, 1).unwrap(),
            bank: LatentBank {
                dim: 2,
                latents: vec![vec![0.1, -0.2], vec![0.3, 0.4]],
                descriptors: Some(vec![vec![0.0], vec![1.0]]),
            },
            family: Family::Ode,
            instances: vec![InstanceSpec::Ode { eta: 0.0 }, InstanceSpec::Ode { eta: 1.0 }],
            manifest: Manifest {
                train: TrainConfig::default(),
                seed: 3,
                iterations: 10,
                status: RunStatus::Completed,
                code_version: "test".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode_model(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match decode_model(&bytes) {
            Err(Error::Persist(PersistError::Checksum { .. })) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn version_bump_is_reported() {
        let mut bytes = encode_model(&model()).unwrap();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let err = decode_model(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut m = model();
        m.bank.latents[0][0] = f64::NAN;
        assert!(matches!(
            encode_model(&m),
            Err(Error::Persist(PersistError::NonFinite("latent")))
        ));
    }

    #[test]
    fn wrong_kind_and_truncation() {
        let bytes = encode_bank(&model().bank).unwrap();
        assert!(matches!(decode_model(&bytes), Err(Error::Persist(PersistError::Kind { .. }))));
        assert!(decode_bank(&bytes[..10]).is_err());
        assert!(matches!(decode_bank(b"notafile"), Err(Error::Persist(PersistError::BadMagic))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
        assert!(!dir.path().join(".m.ckpt.tmp").exists());
        assert!(matches!(load_model(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
