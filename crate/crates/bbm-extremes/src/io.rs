//! Serialization of populations, point configurations and analysis curves.
//! Column layouts are documented in FORMATS.md. Floats are written with
//! Rust's shortest-roundtrip formatting, so files are byte-reproducible and
//! parse back to identical values.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::engine::{Mode, Particle, Population, NO_PARENT};
use crate::error::{Error, Result};
use crate::genealogy::PointConfiguration;
use crate::spine::ClusterSample;

pub const POPULATION_MAGIC: &[u8; 4] = b"BBMP";
pub const POPULATION_BINARY_VERSION: u32 = 1;

fn mode_tag(mode: Mode) -> u8 {
    match mode {
        Mode::Exact => 0,
        Mode::Barrier => 1,
    }
}

fn mode_from_tag(tag: u8) -> Result<Mode> {
    match tag {
        0 => Ok(Mode::Exact),
        1 => Ok(Mode::Barrier),
        other => Err(Error::InvalidParam(format!("unknown mode tag {other}"))),
    }
}

/// One row per particle: id, parent (empty for the root), birth time and
/// position, end time and position, alive flag.
pub fn write_population_csv<W: Write>(pop: &Population, out: &mut W) -> Result<()> {
    writeln!(out, "id,parent,birth_time,birth_pos,end_time,end_pos,alive")?;
    for (id, p) in pop.particles.iter().enumerate() {
        let parent = if p.parent == NO_PARENT {
            String::new()
        } else {
            p.parent.to_string()
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            id, parent, p.birth_time, p.birth_pos, p.end_time, p.end_pos, p.alive as u8
        )?;
    }
    Ok(())
}

pub fn read_population_csv<R: Read>(input: R, horizon: f64, mode: Mode) -> Result<Population> {
    let reader = BufReader::new(input);
    let mut particles = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::InvalidParam(format!("bad population row: {line}")));
        }
        let parse =
            |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::InvalidParam(s.into())) };
        particles.push(Particle {
            parent: if fields[1].is_empty() {
                NO_PARENT
            } else {
                fields[1]
                    .parse()
                    .map_err(|_| Error::InvalidParam(fields[1].into()))?
            },
            birth_time: parse(fields[2])?,
            birth_pos: parse(fields[3])?,
            end_time: parse(fields[4])?,
            end_pos: parse(fields[5])?,
            alive: fields[6] == "1",
        });
    }
    Ok(Population {
        particles,
        horizon,
        pruned_count: 0,
        mode,
    })
}

/// Columnar little-endian binary layout; see FORMATS.md.
pub fn write_population_binary<W: Write>(pop: &Population, out: &mut W) -> Result<()> {
    out.write_all(POPULATION_MAGIC)?;
    out.write_all(&POPULATION_BINARY_VERSION.to_le_bytes())?;
    out.write_all(&(pop.particles.len() as u64).to_le_bytes())?;
    out.write_all(&pop.horizon.to_le_bytes())?;
    out.write_all(&[mode_tag(pop.mode)])?;
    out.write_all(&pop.pruned_count.to_le_bytes())?;
    for p in &pop.particles {
        out.write_all(&p.parent.to_le_bytes())?;
    }
    for p in &pop.particles {
        out.write_all(&p.birth_time.to_le_bytes())?;
    }
    for p in &pop.particles {
        out.write_all(&p.birth_pos.to_le_bytes())?;
    }
    for p in &pop.particles {
        out.write_all(&p.end_time.to_le_bytes())?;
    }
    for p in &pop.particles {
        out.write_all(&p.end_pos.to_le_bytes())?;
    }
    for p in &pop.particles {
        out.write_all(&[p.alive as u8])?;
    }
    Ok(())
}

pub fn read_population_binary<R: Read>(mut input: R) -> Result<Population> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != POPULATION_MAGIC {
        return Err(Error::InvalidParam("not a population binary".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != POPULATION_BINARY_VERSION {
        return Err(Error::InvalidParam(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8)?;
    let horizon = f64::from_le_bytes(b8);
    let mut b1 = [0u8; 1];
    input.read_exact(&mut b1)?;
    let mode = mode_from_tag(b1[0])?;
    input.read_exact(&mut b8)?;
    let pruned_count = u64::from_le_bytes(b8);

    let mut particles = vec![
        Particle {
            parent: NO_PARENT,
            birth_time: 0.0,
            birth_pos: 0.0,
            end_time: 0.0,
            end_pos: 0.0,
            alive: false,
        };
        n
    ];
    for p in particles.iter_mut() {
        input.read_exact(&mut b4)?;
        p.parent = u32::from_le_bytes(b4);
    }
    macro_rules! read_f64_column {
        ($field:ident) => {
            for p in particles.iter_mut() {
                input.read_exact(&mut b8)?;
                p.$field = f64::from_le_bytes(b8);
            }
        };
    }
    read_f64_column!(birth_time);
    read_f64_column!(birth_pos);
    read_f64_column!(end_time);
    read_f64_column!(end_pos);
    for p in particles.iter_mut() {
        input.read_exact(&mut b1)?;
        p.alive = b1[0] == 1;
    }
    Ok(Population {
        particles,
        horizon,
        pruned_count,
        mode,
    })
}

/// height, multiplicity[, cluster-id].
pub fn write_point_configuration_csv<W: Write>(
    config: &PointConfiguration,
    cluster_id: Option<u64>,
    header: bool,
    out: &mut W,
) -> Result<()> {
    if header {
        match cluster_id {
            Some(_) => writeln!(out, "height,multiplicity,cluster_id")?,
            None => writeln!(out, "height,multiplicity")?,
        }
    }
    for &(h, m) in config.atoms() {
        match cluster_id {
            Some(id) => writeln!(out, "{h},{m},{id}")?,
            None => writeln!(out, "{h},{m}")?,
        }
    }
    Ok(())
}

/// sample-id, atom-height; one row per atom with multiplicity expanded.
pub fn write_cluster_samples_csv<W: Write>(samples: &[ClusterSample], out: &mut W) -> Result<()> {
    writeln!(out, "sample_id,atom_height")?;
    for (i, s) in samples.iter().enumerate() {
        for h in s.config.expanded() {
            writeln!(out, "{i},{h}")?;
        }
    }
    Ok(())
}

/// Generic curve writer: one header line, then rows of plain columns.
pub fn write_curve_csv<W: Write>(header: &str, rows: &[Vec<f64>], out: &mut W) -> Result<()> {
    writeln!(out, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Per-replica summary rows; level/star count columns carry the v in their
/// header names.
pub fn write_summary_csv<W: Write>(
    rows: &[crate::runner::ReplicaSummary],
    v_grid: &[f64],
    out: &mut W,
) -> Result<()> {
    let mut header =
        String::from("replica,leaf_count,max_centered,gap12,z,z_companion,pruned_subtrees");
    for v in v_grid {
        header.push_str(&format!(",n_{v}"));
    }
    for v in v_grid {
        header.push_str(&format!(",s_{v}"));
    }
    writeln!(out, "{header}")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            r.replica,
            r.leaf_count,
            r.max_centered,
            opt(r.gap12),
            opt(r.z),
            opt(r.z_companion),
            r.pruned_subtrees
        );
        for c in &r.level_counts {
            line.push_str(&format!(",{c}"));
        }
        for c in &r.star_counts {
            line.push_str(&format!(",{c}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a summary CSV back; carrier statistics live in their own file.
pub fn read_summary_csv<R: Read>(
    input: R,
) -> Result<(Vec<f64>, Vec<crate::runner::ReplicaSummary>)> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidParam("empty summary".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let v_grid: Vec<f64> = cols
        .iter()
        .filter_map(|c| c.strip_prefix("n_"))
        .map(|v| v.parse::<f64>().map_err(|_| Error::InvalidParam(v.into())))
        .collect::<Result<_>>()?;
    let k = v_grid.len();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 + 2 * k {
            return Err(Error::InvalidParam(format!("bad summary row: {line}")));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::InvalidParam(s.into()))
            }
        };
        let parse_u64 = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::InvalidParam(s.into()))
        };
        rows.push(crate::runner::ReplicaSummary {
            replica: parse_u64(f[0])?,
            leaf_count: parse_u64(f[1])?,
            max_centered: f[2]
                .parse()
                .map_err(|_| Error::InvalidParam(f[2].into()))?,
            gap12: opt(f[3])?,
            z: opt(f[4])?,
            z_companion: opt(f[5])?,
            pruned_subtrees: parse_u64(f[6])?,
            level_counts: f[7..7 + k]
                .iter()
                .map(|s| parse_u64(s))
                .collect::<Result<_>>()?,
            star_counts: f[7 + k..7 + 2 * k]
                .iter()
                .map(|s| parse_u64(s))
                .collect::<Result<_>>()?,
            carrier_stats: Vec::new(),
        });
    }
    Ok((v_grid, rows))
}

/// replica, carrier statistic; one row per carrier sample.
pub fn write_carriers_csv<W: Write>(
    rows: &[crate::runner::ReplicaSummary],
    out: &mut W,
) -> Result<()> {
    writeln!(out, "replica,statistic")?;
    for r in rows {
        for s in &r.carrier_stats {
            writeln!(out, "{},{}", r.replica, s)?;
        }
    }
    Ok(())
}

pub fn read_carriers_csv<R: Read>(input: R) -> Result<Vec<f64>> {
    let reader = BufReader::new(input);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let s = line
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::InvalidParam(format!("bad carriers row: {line}")))?;
        out.push(s.parse().map_err(|_| Error::InvalidParam(s.into()))?);
    }
    Ok(out)
}

pub fn write_json_pretty<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn to_file(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, SimConfig};

    #[test]
    fn population_roundtrips() {
        let pop = simulate(&SimConfig::exact(3.0, 5).with_replica(2)).unwrap();

        let mut csv = Vec::new();
        write_population_csv(&pop, &mut csv).unwrap();
        let back = read_population_csv(csv.as_slice(), pop.horizon, pop.mode).unwrap();
        assert_eq!(back.particles.len(), pop.particles.len());
        for (a, b) in back.particles.iter().zip(&pop.particles) {
            assert_eq!(a.end_pos.to_bits(), b.end_pos.to_bits());
            assert_eq!(a.parent, b.parent);
            assert_eq!(a.alive, b.alive);
        }

        let mut bin = Vec::new();
        write_population_binary(&pop, &mut bin).unwrap();
        let back = read_population_binary(bin.as_slice()).unwrap();
        assert_eq!(back.horizon, pop.horizon);
        assert_eq!(back.pruned_count, pop.pruned_count);
        for (a, b) in back.particles.iter().zip(&pop.particles) {
            assert_eq!(a.birth_time.to_bits(), b.birth_time.to_bits());
            assert_eq!(a.end_time.to_bits(), b.end_time.to_bits());
            assert_eq!(a.end_pos.to_bits(), b.end_pos.to_bits());
        }
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(read_population_binary(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn csv_output_is_deterministic() {
        let pop = simulate(&SimConfig::exact(2.0, 9).with_replica(1)).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_population_csv(&pop, &mut a).unwrap();
        write_population_csv(&pop, &mut b).unwrap();
        assert_eq!(a, b);
    }
}
