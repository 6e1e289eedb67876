//! Versioned binary chip snapshots ("ASCHPUF1").
//!
//! Layout (little-endian throughout): the 8-byte magic, the chip id as a
//! u16 length plus UTF-8 bytes, rows and cols as u32, the thirteen model
//! config fields, then rows*cols cells of eight f64 values each
//! (dv/tc/vc/drift for the original and healed configurations).

use std::io::{Read, Write};

use super::{stream, CellModel, ChipModel, Environment, ModelConfig};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ASCHPUF1";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a chip snapshot")]
    BadMagic,
    #[error("truncated snapshot")]
    Truncated,
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], SnapshotError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SnapshotError::Truncated
        } else {
            SnapshotError::Io(e)
        }
    })?;
    Ok(buf)
}

fn read_f64(r: &mut impl Read) -> Result<f64, SnapshotError> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32, SnapshotError> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

impl ChipModel {
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<(), SnapshotError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        let id = self.chip_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.cols.to_le_bytes())?;
        let m = &self.model;
        for v in [
            m.sigma_process,
            m.sigma_noise,
            m.sigma_tempco,
            m.sigma_voltco,
            m.heal_correlation,
            m.heal_bias,
            m.imbalance_range,
            m.nominal_env.vdd,
            m.nominal_env.temperature,
            m.sigma_age,
            m.aging_temp_coeff,
            m.aging_vdd_coeff,
        ] {
            write_f64(w, v)?;
        }
        w.write_all(&m.seed.to_le_bytes())?;
        for cell in &self.cells {
            for v in [
                cell.dv_orig,
                cell.dv_heal,
                cell.tc_orig,
                cell.tc_heal,
                cell.vc_orig,
                cell.vc_heal,
                cell.drift_orig,
                cell.drift_heal,
            ] {
                write_f64(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot(r: &mut impl Read) -> Result<ChipModel, SnapshotError> {
        let magic = read_exact::<8>(r)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let id_len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes).map_err(|_| SnapshotError::Truncated)?;
        let chip_id = String::from_utf8(id_bytes)
            .map_err(|_| SnapshotError::Malformed("chip id is not utf-8".into()))?;
        let rows = read_u32(r)?;
        let cols = read_u32(r)?;
        if rows == 0 || cols == 0 {
            return Err(SnapshotError::Malformed("zero array dimension".into()));
        }
        let n = rows as u64 * cols as u64;
        if n > 1 << 28 {
            return Err(SnapshotError::Malformed(format!("array too large: {n} cells")));
        }
        let mut f = [0.0f64; 12];
        for v in f.iter_mut() {
            *v = read_f64(r)?;
        }
        let seed = u64::from_le_bytes(read_exact::<8>(r)?);
        let model = ModelConfig {
            sigma_process: f[0],
            sigma_noise: f[1],
            sigma_tempco: f[2],
            sigma_voltco: f[3],
            heal_correlation: f[4],
            heal_bias: f[5],
            imbalance_range: f[6],
            nominal_env: Environment { vdd: f[7], temperature: f[8] },
            sigma_age: f[9],
            aging_temp_coeff: f[10],
            aging_vdd_coeff: f[11],
            seed,
        };
        let mut cells = Vec::with_capacity(n as usize);
        for _ in 0..n {
            cells.push(CellModel {
                dv_orig: read_f64(r)?,
                dv_heal: read_f64(r)?,
                tc_orig: read_f64(r)?,
                tc_heal: read_f64(r)?,
                vc_orig: read_f64(r)?,
                vc_heal: read_f64(r)?,
                drift_orig: read_f64(r)?,
                drift_heal: read_f64(r)?,
            });
        }
        Ok(ChipModel {
            stream_tag: stream::chip_tag(model.seed, &chip_id),
            chip_id,
            rows,
            cols,
            cells,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::sample_chip;
    use super::*;

    #[test]
    fn snapshot_roundtrip_is_bit_exact() {
        let cfg = ModelConfig { seed: 1234, ..ModelConfig::default() };
        let chip = sample_chip(&cfg, "chip-07", 8, 16);
        let mut buf = Vec::new();
        chip.write_snapshot(&mut buf).unwrap();
        let back = ChipModel::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, chip);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let mut buf = Vec::new();
        let cfg = ModelConfig::default();
        sample_chip(&cfg, "x", 2, 2).write_snapshot(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ChipModel::read_snapshot(&mut bad.as_slice()),
            Err(SnapshotError::BadMagic)
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            ChipModel::read_snapshot(&mut &truncated[..]),
            Err(SnapshotError::Truncated)
        ));
    }
}
