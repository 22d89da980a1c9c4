use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::generate::SyntheticExample;
use crate::error::{CitiError, Result};

/// One JSON record per line: `{"prompt":[..],"target":[..],"task":"ARITH","is_tool":false}`.
pub fn write_jsonl(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticExample>> {
    if !path.exists() {
        return Err(CitiError::MissingPath(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: SyntheticExample = serde_json::from_str(&line)?;
        if e.is_tool != (e.task == super::TaskKind::Toolcall) || e.target.last() != Some(&super::EOS) {
            return Err(CitiError::contract(format!("inconsistent record: {line}")));
        }
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, TaskKind};

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut data = generate_dataset(TaskKind::Toolcall, 20, 1).unwrap();
        data.extend(generate_dataset(TaskKind::Arith, 20, 1).unwrap());
        write_jsonl(&p, &data).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back, data);
        write_jsonl(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }
}
