//! Binary checkpoint format.
//!
//! ```text
//! "DAAE"  u32 version
//! section*  (u64 byte length, payload)
//!   1 config       canonical JSON (sorted keys, UTF-8)
//!   2 center       u64 dim, f64[dim], u64 n_samples_used, f64 mean_radius_at_init
//!   3 generator    network
//!   4 discriminator network
//!   5 auxiliary    network
//!   6 optimizer    per network: u64 t, u32 count, then per tensor u64 len, f64[len] m, f64[len] v
//!   7 counters     u64 step, u64 epoch
//!
//! network := u32 kind-len, kind, u64 init_seed, u32 count,
//!            count × (u32 name-len, name, u32 ndim, u64[ndim] dims, f64[numel])
//! ```
//!
//! Everything is little-endian. Gradients are not stored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{NetworkKind, NetworkParams};
use crate::optim::{AdamState, Moments};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, LatentCenter, TrainConfig};

pub const MAGIC: &[u8; 4] = b"DAAE";
pub const VERSION: u32 = 1;
const SECTIONS: usize = 7;

/// Serializes `cfg` as JSON with lexicographically sorted keys.
pub fn canonical_json<T: serde::Serialize>(cfg: &T) -> Result<String> {
    // serde_json's Value map is ordered by key unless `preserve_order` is on.
    Ok(serde_json::to_string(&serde_json::to_value(cfg)?)?)
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_network(out: &mut Out, p: &NetworkParams) {
    out.str(p.kind.name());
    out.u64(p.init_seed);
    out.u32(p.entries.len() as u32);
    for (name, t) in &p.entries {
        out.str(name);
        out.u32(t.shape().len() as u32);
        for &d in t.shape() {
            out.u64(d as u64);
        }
        out.f64s(t.values());
    }
}

fn read_network(inp: &mut In, config: &TrainConfig, expected: NetworkKind) -> Result<NetworkParams> {
    let kind_name = inp.str()?;
    let kind = NetworkKind::from_name(&kind_name)
        .ok_or_else(|| Error::Format(format!("unknown network kind {kind_name:?}")))?;
    if kind != expected {
        return Err(Error::Format(format!(
            "expected {} section, found {kind_name}",
            expected.name()
        )));
    }
    let init_seed = inp.u64()?;
    let count = inp.u32()? as usize;
    let expected_layout = crate::networks::layout(&config.arch, kind);
    if count != expected_layout.len() {
        return Err(Error::Format(format!(
            "{kind_name}: {count} tensors, architecture needs {}",
            expected_layout.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for (want_name, want_shape) in expected_layout {
        let name = inp.str()?;
        let ndim = inp.u32()? as usize;
        let shape = (0..ndim).map(|_| inp.len()).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::Format(format!(
                "{kind_name}: tensor {name} {shape:?} does not match {want_name} {want_shape:?}"
            )));
        }
        let values = inp.f64s(shape.iter().product())?;
        entries.push((name, Tensor::new(shape, values)?.with_requires_grad(true)));
    }
    Ok(NetworkParams {
        kind,
        arch: config.arch,
        init_seed,
        entries,
    })
}

fn write_adam(out: &mut Out, s: &AdamState) {
    out.u64(s.t);
    out.u32(s.moments.len() as u32);
    for m in &s.moments {
        out.u64(m.m.len() as u64);
        out.f64s(&m.m);
        out.f64s(&m.v);
    }
}

fn read_adam(inp: &mut In, params: &NetworkParams) -> Result<AdamState> {
    let t = inp.u64()?;
    let count = inp.u32()? as usize;
    if count != params.entries.len() {
        return Err(Error::Format(format!(
            "optimizer has {count} moment pairs, network has {} tensors",
            params.entries.len()
        )));
    }
    let mut moments = Vec::with_capacity(count);
    for (_, p) in &params.entries {
        let len = inp.len()?;
        if len != p.len() {
            return Err(Error::Format(format!(
                "moment length {len} != parameter length {}",
                p.len()
            )));
        }
        let m = inp.f64s(len)?;
        let v = inp.f64s(len)?;
        moments.push(Moments { m, v });
    }
    Ok(AdamState { t, moments })
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut sections: Vec<Out> = (0..SECTIONS).map(|_| Out::default()).collect();
    sections[0].0.extend_from_slice(canonical_json(&ck.config)?.as_bytes());
    {
        let s = &mut sections[1];
        s.u64(ck.center.c.len() as u64);
        s.f64s(&ck.center.c);
        s.u64(ck.center.n_samples_used as u64);
        s.f64s(&[ck.center.mean_radius_at_init]);
    }
    write_network(&mut sections[2], &ck.generator);
    write_network(&mut sections[3], &ck.discriminator);
    write_network(&mut sections[4], &ck.auxiliary);
    write_adam(&mut sections[5], &ck.opt_generator);
    write_adam(&mut sections[5], &ck.opt_discriminator);
    write_adam(&mut sections[5], &ck.opt_auxiliary);
    sections[6].u64(ck.step);
    sections[6].u64(ck.epoch);

    let mut out = Out::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    for s in sections {
        out.u64(s.0.len() as u64);
        out.0.extend_from_slice(&s.0);
    }
    Ok(out.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut top = In { buf: bytes, pos: 0 };
    let magic = top
        .take(4)
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = top.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut sections = Vec::with_capacity(SECTIONS);
    for _ in 0..SECTIONS {
        let len = top.len()?;
        sections.push(top.take(len)?);
    }
    if !top.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let section = |i: usize| In {
        buf: sections[i],
        pos: 0,
    };

    let config_text =
        std::str::from_utf8(sections[0]).map_err(|_| Error::Format("config section is not UTF-8".into()))?;
    let config: TrainConfig = serde_json::from_str(config_text)?;
    config.validate()?;

    let mut s = section(1);
    let dim = s.len()?;
    let c = s.f64s(dim)?;
    let n_samples_used = s.len()?;
    let mean_radius_at_init = s.f64s(1)?[0];
    if dim != config.arch.latent_dim {
        return Err(Error::Format(format!(
            "center has {dim} coordinates, latent_dim is {}",
            config.arch.latent_dim
        )));
    }
    let center = LatentCenter {
        c,
        n_samples_used,
        mean_radius_at_init,
    };

    let generator = read_network(&mut section(2), &config, NetworkKind::Generator)?;
    let discriminator = read_network(&mut section(3), &config, NetworkKind::Discriminator)?;
    let auxiliary = read_network(&mut section(4), &config, NetworkKind::Auxiliary)?;

    let mut s = section(5);
    let opt_generator = read_adam(&mut s, &generator)?;
    let opt_discriminator = read_adam(&mut s, &discriminator)?;
    let opt_auxiliary = read_adam(&mut s, &auxiliary)?;

    let mut s = section(6);
    let step = s.u64()?;
    let epoch = s.u64()?;

    Ok(Checkpoint {
        config,
        center,
        generator,
        discriminator,
        auxiliary,
        opt_generator,
        opt_discriminator,
        opt_auxiliary,
        step,
        epoch,
    })
}

pub fn save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(ck)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchSpec;

    fn small_checkpoint() -> Checkpoint {
        let cfg = TrainConfig {
            arch: ArchSpec {
                base_filters: 2,
                latent_dim: 4,
                ..ArchSpec::default()
            },
            batch_size: 2,
            ..TrainConfig::default()
        };
        let x = Tensor::new(
            vec![3, 1, 16, 16],
            (0..768).map(|i| ((i % 17) as f64) / 17.0 - 0.5).collect(),
        )
        .unwrap();
        Checkpoint::initialize(&cfg, &x).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small_checkpoint()).unwrap();
        assert_eq!(&bytes[..4], b"DAAE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + json_len]).unwrap();
        assert!(json.starts_with("{\"adam_beta1\":0.5,"), "{json}");
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = small_checkpoint();
        let bytes = to_bytes(&ck).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = to_bytes(&small_checkpoint()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let s = canonical_json(&ArchSpec::default()).unwrap();
        assert_eq!(
            s,
            r#"{"base_filters":16,"image_channels":1,"image_size":16,"latent_dim":32,"layers_per_stage":1}"#
        );
    }
}
