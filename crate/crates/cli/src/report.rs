//! `report` subcommand: scans a directory for result records and prints a
//! per-task summary table.

use std::path::Path;

use serde_json::Value;

use crate::tasks::{read_record, CliError};

fn metric_of(record: &Value) -> String {
    let task = record.get("task").and_then(Value::as_str).unwrap_or("?");
    match task {
        "phi" => format!(
            "samples={} monotone={}",
            record["samples"].as_u64().unwrap_or(0),
            record["monotone_in_doubling"].as_bool().unwrap_or(false)
        ),
        "fhom" => {
            let phases = record["phases"].as_array().map(|a| a.len()).unwrap_or(0);
            format!("phases={phases}")
        }
        "islands" => format!("m={}", record["m"]),
        "gamma-check" => format!(
            "macro_min={} gaps={} decreasing={}",
            record["macro_min"],
            record["gaps"],
            record["gaps_decreasing"]
        ),
        "flow-micro" | "flow-macro" => format!(
            "steps={} dissipative={}",
            record["steps"],
            record["dissipative"]
        ),
        "flow-compare" => format!(
            "errors={} decreasing={}",
            record["errors"],
            record["errors_decreasing"]
        ),
        "analyze" => format!(
            "components={} islands={}",
            record["components"].as_array().map(|a| a.len()).unwrap_or(0),
            record["islands"].as_array().map(|a| a.len()).unwrap_or(0)
        ),
        _ => String::new(),
    }
}

pub fn report(dir: &Path) -> Result<(), CliError> {
    let mut entries: Vec<_> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.path()).collect(),
        Err(e) => {
            return Err(CliError::Validation(format!(
                "cannot read {}: {e}",
                dir.display()
            )))
        }
    };
    entries.sort();
    println!("{:<28} {:<14} {:<18} summary", "file", "task", "config");
    let mut corrupt = Vec::new();
    for path in entries {
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("?")
            .to_string();
        match read_record(&path) {
            Some(record) => {
                println!(
                    "{:<28} {:<14} {:<18} {}",
                    name,
                    record["task"].as_str().unwrap_or("?"),
                    record["config_hash"].as_str().unwrap_or("?"),
                    metric_of(&record)
                );
            }
            None => corrupt.push(name),
        }
    }
    for name in corrupt {
        eprintln!("warning: {name}: not a readable result record");
    }
    Ok(())
}
