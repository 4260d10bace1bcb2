//! Report files. JSON reports carry `schema_version`, the command, the seed and the full
//! configuration next to the data; CSV reports carry the same block as a leading `#` line.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct Report<C, D> {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: C,
    pub data: D,
}

impl<C: Serialize, D: Serialize> Report<C, D> {
    pub fn new(command: impl Into<String>, seed: u64, config: C, data: D) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            seed,
            config,
            data,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// The metadata block followed by one CSV record per row.
    pub fn to_csv<R: Serialize>(&self, rows: &[R]) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a, C> {
            schema_version: u32,
            command: &'a str,
            seed: u64,
            config: &'a C,
        }
        let meta = serde_json::to_string(&Meta {
            schema_version: self.schema_version,
            command: &self.command,
            seed: self.seed,
            config: &self.config,
        })?;
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in rows {
            writer.serialize(row)?;
        }
        let body = String::from_utf8(writer.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is utf-8");
        Ok(format!("# {meta}\n{body}"))
    }

    pub fn write_csv<R: Serialize>(&self, path: &Path, rows: &[R]) -> Result<()> {
        write_atomic(path, self.to_csv(rows)?.as_bytes())
    }
}
