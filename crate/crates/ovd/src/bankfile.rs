//! Embedding bank on disk: an OVDT `[K, D]` matrix plus a JSON sidecar
//! mapping row index to class id and name.

use std::fs;
use std::path::{Path, PathBuf};

use ovd_core::EmbeddingBank;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::write_json;
use crate::ovdt::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankRow {
    pub index: usize,
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSidecar {
    pub rows: Vec<BankRow>,
}

/// `bank.ovdt` becomes `bank.json`.
pub fn sidecar_path(matrix: &Path) -> PathBuf {
    matrix.with_extension("json")
}

pub fn write_bank(matrix: &Path, bank: &EmbeddingBank) -> Result<()> {
    let t = Tensor::new(vec![bank.len() as u64, bank.dim() as u64], bank.rows().to_vec())?;
    t.write(matrix)?;
    let rows = bank
        .class_ids()
        .iter()
        .zip(bank.names())
        .enumerate()
        .map(|(index, (&id, name))| BankRow {
            index,
            id,
            name: name.clone(),
        })
        .collect();
    write_json(&sidecar_path(matrix), &BankSidecar { rows })
}

pub fn read_bank(matrix: &Path) -> Result<EmbeddingBank> {
    let t = Tensor::read(matrix)?;
    let [k, d] = match t.dims_usize()[..] {
        [k, d] => [k, d],
        _ => return Err(Error::schema(format!("bank matrix must be rank 2, has {:?}", t.dims))),
    };
    let side = sidecar_path(matrix);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut sidecar: BankSidecar =
        serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", side.display())))?;
    sidecar.rows.sort_by_key(|r| r.index);
    if sidecar.rows.len() != k || sidecar.rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(Error::schema(format!("bank sidecar must describe rows 0..{k} exactly once")));
    }
    EmbeddingBank::from_rows(
        sidecar.rows.iter().map(|r| r.id).collect(),
        sidecar.rows.into_iter().map(|r| r.name).collect(),
        d,
        t.data,
    )
    .map_err(Error::schema)
}
