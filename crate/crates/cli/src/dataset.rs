//! Dataset files: a grid description plus training values, either inline,
//! in a binary sidecar, or as sparse per-point records.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use gridgpr::files::{self, GridDescription};
use gridgpr::grid::{IncompleteGrid, ModeCombination};

use crate::CliError;

/// Reference to a binary values sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValuesRef {
    pub path: String,
    pub digest: String,
}

/// One sparse record: the displaced modes (1-based), their 1D indices, and
/// the observed value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub mc: Vec<usize>,
    pub a: Vec<usize>,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format_version: u32,
    pub grid: GridDescription,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values_file: Option<ValuesRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<Record>>,
}

/// A loaded dataset: the grid and one value per point in canonical order.
#[derive(Debug)]
pub struct Dataset {
    pub grid: Arc<IncompleteGrid>,
    pub values: Vec<f64>,
}

pub fn load(path: &Path) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed dataset {}: {e}", path.display())))?;
    let grid = file.grid.build()?;
    let n = grid.len();

    let provided = [
        file.values.is_some(),
        file.values_file.is_some(),
        file.records.is_some(),
    ]
    .iter()
    .filter(|&&x| x)
    .count();
    if provided != 1 {
        return Err(CliError::Usage(
            "dataset needs exactly one of values, values_file or records".into(),
        ));
    }

    let values = if let Some(values) = file.values {
        if values.len() != n {
            return Err(CliError::Usage(format!(
                "dataset has {} values but the grid has {n} points",
                values.len()
            )));
        }
        values
    } else if let Some(vref) = file.values_file {
        let sidecar = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&vref.path);
        let values = files::read_f64_sidecar(&sidecar, Some(&vref.digest))?;
        if values.len() != n {
            return Err(CliError::Usage(format!(
                "sidecar has {} values but the grid has {n} points",
                values.len()
            )));
        }
        values
    } else {
        let records = file.records.unwrap();
        let mut values = vec![f64::NAN; n];
        let mut filled = vec![false; n];
        for (row, record) in records.iter().enumerate() {
            let err = |msg: String| {
                CliError::Usage(format!("record {row} ({:?}): {msg}", record.mc))
            };
            for &m in &record.mc {
                if m == 0 {
                    return Err(err("mode indices are 1-based".into()));
                }
            }
            let zero_based: Vec<usize> = record.mc.iter().map(|&m| m - 1).collect();
            let mc = ModeCombination::new(&zero_based, grid.dims())
                .map_err(|e| err(e.to_string()))?;
            let flat = grid
                .flat_index(&mc, &record.a)
                .map_err(|e| err(e.to_string()))? as usize;
            if filled[flat] {
                return Err(err("duplicate record for this grid point".into()));
            }
            filled[flat] = true;
            values[flat] = record.y;
        }
        if let Some(first_missing) = filled.iter().position(|&f| !f) {
            let (id, a) = grid.locate(first_missing as u64).unwrap();
            return Err(CliError::Usage(format!(
                "records do not cover every grid point: missing {} at indices {:?}",
                grid.mcr().mc(id),
                a
            )));
        }
        values
    };
    Ok(Dataset { grid, values })
}

/// Writes a dataset with inline values.
pub fn save_inline(
    path: &Path,
    grid: &IncompleteGrid,
    values: &[f64],
) -> Result<(), CliError> {
    let file = DatasetFile {
        format_version: 1,
        grid: GridDescription::from_grid(grid),
        values: Some(values.to_vec()),
        values_file: None,
        records: None,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Writes a dataset whose values live in a binary sidecar next to it.
pub fn save_with_sidecar(
    path: &Path,
    grid: &IncompleteGrid,
    values: &[f64],
) -> Result<(), CliError> {
    let sidecar_name = path
        .file_stem()
        .map(|s| format!("{}.bin", s.to_string_lossy()))
        .unwrap_or_else(|| "values.bin".into());
    let sidecar = path.with_file_name(&sidecar_name);
    let digest = files::write_f64_sidecar(&sidecar, values)?;
    let file = DatasetFile {
        format_version: 1,
        grid: GridDescription::from_grid(grid),
        values: None,
        values_file: Some(ValuesRef {
            path: sidecar_name,
            digest,
        }),
        records: None,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
