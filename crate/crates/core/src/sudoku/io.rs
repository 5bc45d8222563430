//! Dataset CSV: one `givens,solution` record per line, each field a string of
//! `side²` digits. Blanks in the givens are written `0` or `.`. A first line
//! whose first field is not made of digits/dots is treated as a header.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{PuzzleInstance, Result, SudokuError};

fn parse_cells(field: &str, allow_blank: bool, line: u64) -> Result<Vec<u8>> {
    field
        .chars()
        .map(|ch| match ch {
            '.' | '0' if allow_blank => Ok(0),
            '1'..='9' => Ok(ch as u8 - b'0'),
            other => Err(SudokuError::Parse {
                line,
                reason: format!("invalid character {other:?}"),
            }),
        })
        .collect()
}

fn side_for(len: usize, line: u64) -> Result<usize> {
    match len {
        16 => Ok(4),
        81 => Ok(9),
        other => Err(SudokuError::Parse {
            line,
            reason: format!("grid string of length {other}; expected 16 or 81"),
        }),
    }
}

fn looks_like_header(field: &str) -> bool {
    !field.chars().all(|c| c.is_ascii_digit() || c == '.')
}

pub fn parse_dataset_str(text: &str) -> Result<Vec<PuzzleInstance>> {
    parse_reader(text.as_bytes())
}

pub fn parse_dataset_file(path: impl AsRef<Path>) -> Result<Vec<PuzzleInstance>> {
    parse_reader(File::open(path)?)
}

fn parse_reader(input: impl Read) -> Result<Vec<PuzzleInstance>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(index as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if index == 0 && looks_like_header(&record[0]) {
            continue;
        }
        if record.len() != 2 {
            return Err(SudokuError::Parse {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let (g, s) = (&record[0], &record[1]);
        let side = side_for(g.len(), line)?;
        if s.len() != g.len() {
            return Err(SudokuError::Parse {
                line,
                reason: format!("givens have {} cells but solution has {}", g.len(), s.len()),
            });
        }
        let givens = parse_cells(g, true, line)?;
        let solution = parse_cells(s, false, line)?;
        let p = PuzzleInstance::new(side, givens, solution).map_err(|e| SudokuError::Parse {
            line,
            reason: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

fn render(cells: &[u8]) -> String {
    cells.iter().map(|&v| char::from(b'0' + v)).collect()
}

pub fn write_dataset_file(path: impl AsRef<Path>, puzzles: &[PuzzleInstance]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(File::create(path)?);
    writer.write_record(["givens", "solution"])?;
    for p in puzzles {
        writer.write_record([render(&p.givens), render(&p.solution)])?;
    }
    writer.flush()?;
    Ok(())
}
