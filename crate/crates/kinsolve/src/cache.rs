//! On-disk cache for precomputed coefficient tensors.
//!
//! Layout: a self-describing little-endian header (magic, format version,
//! system hash, degree, subsystem/rule counts, quadrature settings) followed
//! by the raw f64 arrays in fixed order: weights, loss block, then one gain
//! block per rule. Round trips are bit-exact; any identity mismatch on load
//! is a stale-cache error rather than silent reuse.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{KinError, Result};
use crate::tensor::{CoefficientMeta, CoefficientSet, QuadConfig};

const MAGIC: &[u8; 4] = b"KINC";
const VERSION: u32 = 1;

/// Write the coefficient set to `path` (parent directories are created).
pub fn cache_store(cs: &CoefficientSet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&cs.meta.system_hash)?;
    out.write_all(&(cs.meta.degree as u32).to_le_bytes())?;
    out.write_all(&(cs.n_subsystems as u32).to_le_bytes())?;
    out.write_all(&(cs.gain.len() as u32).to_le_bytes())?;
    out.write_all(&cs.meta.quad.rel_tol.to_le_bytes())?;
    out.write_all(&cs.meta.quad.max_depth.to_le_bytes())?;
    out.write_all(&cs.meta.quad.base_order_floor.to_le_bytes())?;
    out.write_all(&cs.meta.quad.jacobian_floor.to_le_bytes())?;
    for r in &cs.rules {
        out.write_all(&(r.source as u32).to_le_bytes())?;
        out.write_all(&(r.partner as u32).to_le_bytes())?;
        out.write_all(&(r.target as u32).to_le_bytes())?;
    }
    for w in &cs.weights {
        write_f64s(&mut out, w)?;
    }
    write_f64s(&mut out, &cs.loss)?;
    for g in &cs.gain {
        write_f64s(&mut out, g)?;
    }
    out.flush()?;
    Ok(())
}

/// Load a coefficient set, verifying it matches `expected` (system hash,
/// degree, quadrature settings) and the given subsystem/rule counts.
pub fn cache_load(
    path: &Path,
    expected: &CoefficientMeta,
    n_subsystems: usize,
    n_rules: usize,
) -> Result<CoefficientSet> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut inp, &mut magic)?;
    if &magic != MAGIC {
        return Err(KinError::CacheFormat("bad magic".into()));
    }
    let version = read_u32(&mut inp)?;
    if version != VERSION {
        return Err(KinError::CacheFormat(format!(
            "unsupported cache version {version}"
        )));
    }
    let mut hash = [0u8; 32];
    read_exact(&mut inp, &mut hash)?;
    let degree = read_u32(&mut inp)? as usize;
    let n_sub = read_u32(&mut inp)? as usize;
    let n_rul = read_u32(&mut inp)? as usize;
    let quad = QuadConfig {
        rel_tol: read_f64(&mut inp)?,
        max_depth: read_u32(&mut inp)?,
        base_order_floor: read_u32(&mut inp)?,
        jacobian_floor: read_f64(&mut inp)?,
    };

    if hash != expected.system_hash {
        return Err(KinError::StaleCache(
            "system content hash differs from the cached tensors".into(),
        ));
    }
    if degree != expected.degree {
        return Err(KinError::StaleCache(format!(
            "cached degree {degree} != requested {}",
            expected.degree
        )));
    }
    if quad != expected.quad {
        return Err(KinError::StaleCache(
            "quadrature settings differ from the cached tensors".into(),
        ));
    }
    if n_sub != n_subsystems || n_rul != n_rules {
        return Err(KinError::StaleCache(format!(
            "cached shape ({n_sub} subsystems, {n_rul} rules) != system ({n_subsystems}, {n_rules})"
        )));
    }

    let np1 = degree + 1;
    let mut rules = Vec::with_capacity(n_rul);
    for _ in 0..n_rul {
        let source = read_u32(&mut inp)? as usize;
        let partner = read_u32(&mut inp)? as usize;
        let target = read_u32(&mut inp)? as usize;
        if source >= n_sub || partner >= n_sub || target >= n_sub {
            return Err(KinError::CacheFormat("rule index out of range".into()));
        }
        rules.push(crate::tensor::RuleTopology {
            source,
            partner,
            target,
        });
    }
    let mut weights = Vec::with_capacity(n_sub);
    for _ in 0..n_sub {
        weights.push(read_f64s(&mut inp, np1)?);
    }
    let loss = read_f64s(&mut inp, n_sub * np1 * n_sub * np1)?;
    let mut gain = Vec::with_capacity(n_rul);
    for _ in 0..n_rul {
        gain.push(read_f64s(&mut inp, np1 * np1 * np1)?);
    }
    // Trailing garbage means a corrupt or truncated-then-appended file.
    let mut probe = [0u8; 1];
    if inp.read(&mut probe)? != 0 {
        return Err(KinError::CacheFormat("trailing bytes after tensors".into()));
    }

    Ok(CoefficientSet {
        meta: CoefficientMeta {
            system_hash: hash,
            degree,
            quad,
        },
        n_subsystems: n_sub,
        rules,
        gain,
        loss,
        weights,
    })
}

fn write_f64s<W: Write>(out: &mut W, vals: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(inp: &mut R, buf: &mut [u8]) -> Result<()> {
    inp.read_exact(buf)
        .map_err(|_| KinError::CacheFormat("unexpected end of file".into()))
}

fn read_u32<R: Read>(inp: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(inp, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(inp: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(inp, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<R: Read>(inp: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    read_exact(inp, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{
        ComponentShape, Domain, EncounterRate, InitialComponent, InteractionRule, KineticSystem,
        Subsystem, TransitionFunction,
    };
    use crate::tensor::precompute;

    fn sample_system(gamma: f64) -> KineticSystem {
        KineticSystem {
            subsystems: vec![
                Subsystem {
                    label: "s1".into(),
                    domain: Domain::unit(),
                    initial: vec![InitialComponent {
                        shape: ComponentShape::Uniform,
                        mass: 0.5,
                    }],
                },
                Subsystem {
                    label: "s2".into(),
                    domain: Domain::unit(),
                    initial: vec![InitialComponent {
                        shape: ComponentShape::Uniform,
                        mass: 0.5,
                    }],
                },
            ],
            rules: vec![InteractionRule {
                source: 0,
                partner: 1,
                target: 0,
                phi: TransitionFunction::Left { gamma },
                eta: EncounterRate::Constant(1.0),
            }],
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let sys = sample_system(0.4);
        let cs = precompute(&sys, 5, &QuadConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tensors.kinc");
        cache_store(&cs, &path).unwrap();
        let loaded = cache_load(&path, &cs.meta, cs.n_subsystems, cs.gain.len()).unwrap();
        assert_eq!(cs.rules, loaded.rules);
        assert_eq!(cs.loss.len(), loaded.loss.len());
        for (a, b) in cs.loss.iter().zip(&loaded.loss) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (ga, gb) in cs.gain.iter().zip(&loaded.gain) {
            for (a, b) in ga.iter().zip(gb) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        for (wa, wb) in cs.weights.iter().zip(&loaded.weights) {
            for (a, b) in wa.iter().zip(wb) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_changed_gamma() {
        let sys = sample_system(0.4);
        let cs = precompute(&sys, 4, &QuadConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tensors.kinc");
        cache_store(&cs, &path).unwrap();

        let other = sample_system(0.5);
        let expect = CoefficientMeta {
            system_hash: other.content_hash(),
            ..cs.meta
        };
        assert!(matches!(
            cache_load(&path, &expect, 2, 1),
            Err(KinError::StaleCache(_))
        ));
    }

    #[test]
    fn load_rejects_changed_degree() {
        let sys = sample_system(0.4);
        let cs = precompute(&sys, 4, &QuadConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tensors.kinc");
        cache_store(&cs, &path).unwrap();
        let expect = CoefficientMeta {
            degree: 6,
            ..cs.meta
        };
        assert!(matches!(
            cache_load(&path, &expect, 2, 1),
            Err(KinError::StaleCache(_))
        ));
    }

    #[test]
    fn load_rejects_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tensors.kinc");
        std::fs::write(&path, b"definitely not a tensor cache").unwrap();
        let sys = sample_system(0.4);
        let meta = CoefficientMeta {
            system_hash: sys.content_hash(),
            degree: 4,
            quad: QuadConfig::default(),
        };
        assert!(matches!(
            cache_load(&path, &meta, 2, 1),
            Err(KinError::CacheFormat(_))
        ));
    }
}
