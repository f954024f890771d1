//! On-disk formats: tab-separated interactions, CSV/binary feature
//! matrices, 0/1 mask CSVs, and the replayable split manifest.

use ndarray::Array2;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::split::SplitManifest;
use super::{AvailabilityMask, InteractionSet};
use crate::error::{Error, Result};

/// Magic prefix of the binary feature format.
pub const FEATURES_MAGIC: &[u8; 8] = b"MFEA0001";

/// Read `user<TAB>item` lines into an [`InteractionSet`].
pub fn load_interactions(path: &Path) -> Result<InteractionSet> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let user = fields.next();
        let item = fields.next();
        let (user, item) = match (user, item, fields.next()) {
            (Some(u), Some(i), None) => (u, i),
            _ => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected `user<TAB>item`, got {trimmed:?}"),
                })
            }
        };
        let user: u32 = user.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("invalid user id {user:?}"),
        })?;
        let item: u32 = item.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("invalid item id {item:?}"),
        })?;
        pairs.push((user, item));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no pairs", path.display())));
    }
    InteractionSet::from_pairs(pairs)
}

pub fn write_interactions(path: &Path, set: &InteractionSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for &(u, i) in set.pairs() {
        writeln!(out, "{u}\t{i}")?;
    }
    Ok(())
}

/// Read one feature matrix from CSV, one row per item.
pub fn load_features_csv(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: Vec<f64> = trimmed
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("invalid value {field:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Dimension(format!(
                    "row {} has {} columns, expected {}",
                    idx + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at line {}", idx + 1)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no rows", path.display())));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / dim;
    Array2::from_shape_vec((n, dim), flat)
        .map_err(|e| Error::Dimension(e.to_string()))
}

/// Read one feature matrix from the binary format: magic, u32-le
/// `n_items`, u32-le `dim`, then `n_items * dim` f32-le values row-major.
pub fn load_features_binary(path: &Path) -> Result<Array2<f64>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a feature file (bad magic)",
            path.display()
        )));
    }
    let n_items = read_u32(&mut reader)? as usize;
    let dim = read_u32(&mut reader)? as usize;
    let mut values = Vec::with_capacity(n_items * dim);
    let mut buf = [0u8; 4];
    for _ in 0..n_items * dim {
        reader.read_exact(&mut buf).map_err(|_| {
            Error::Dimension(format!(
                "{}: header promises {n_items}x{dim} values but the file is short",
                path.display()
            ))
        })?;
        let v = f32::from_le_bytes(buf) as f64;
        if !v.is_finite() {
            return Err(Error::Data(format!("{} contains a non-finite value", path.display())));
        }
        values.push(v);
    }
    Array2::from_shape_vec((n_items, dim), values)
        .map_err(|e| Error::Dimension(e.to_string()))
}

pub fn write_features_binary(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FEATURES_MAGIC)?;
    out.write_all(&(matrix.nrows() as u32).to_le_bytes())?;
    out.write_all(&(matrix.ncols() as u32).to_le_bytes())?;
    for &v in matrix.iter() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read an item-by-modality 0/1 mask from CSV.
pub fn load_mask_csv(path: &Path) -> Result<AvailabilityMask> {
    let matrix = load_features_csv(path)?;
    let mut entries = Array2::zeros(matrix.raw_dim());
    for ((j, m), &v) in matrix.indexed_iter() {
        entries[(j, m)] = if v == 0.0 {
            0u8
        } else if v == 1.0 {
            1u8
        } else {
            return Err(Error::Data(format!("mask entry ({j},{m}) is {v}, expected 0 or 1")));
        };
    }
    AvailabilityMask::new(entries)
}

pub fn write_mask_csv(path: &Path, mask: &AvailabilityMask) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in mask.entries().outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn interactions_round_trip_with_dedupe() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.tsv");
        std::fs::write(&path, "0\t1\n0\t2\n1\t1\n0\t1\n").unwrap();
        let set = load_interactions(&path).unwrap();
        assert_eq!(set.n_users(), 2);
        assert_eq!(set.n_items(), 3);
        assert_eq!(set.pairs().len(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.tsv");
        std::fs::write(&path, "0\t1\nnot a line\n").unwrap();
        match load_interactions(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_interactions(&path), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn csv_features_direct_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("feat.csv");
        std::fs::write(&path, "1,0\n0,1\n1,1\n").unwrap();
        let mat = load_features_csv(&path).unwrap();
        assert_eq!(mat, array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn binary_features_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let mat = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]];
        write_features_binary(&path, &mat).unwrap();
        let back = load_features_binary(&path).unwrap();
        assert_eq!(back, mat);
    }

    #[test]
    fn binary_header_contract() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURES_MAGIC);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for v in 0..20 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let mat = load_features_binary(&path).unwrap();
        assert_eq!(mat.dim(), (5, 4));
    }

    #[test]
    fn binary_short_file_is_dimension_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURES_MAGIC);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for v in 0..16 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_features_binary(&path), Err(Error::Dimension(_))));
    }

    #[test]
    fn mask_csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.csv");
        let mask = AvailabilityMask::new(array![[1, 0], [1, 1]]).unwrap();
        write_mask_csv(&path, &mask).unwrap();
        assert_eq!(load_mask_csv(&path).unwrap(), mask);
    }
}
