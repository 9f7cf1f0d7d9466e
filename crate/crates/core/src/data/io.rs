//! Text dataset format.
//!
//! ```text
//! # chimera-dataset 1
//! {"num_classes":4,"dim":2,"len":3,"prior":[...],"noise":{...}}
//! 0\t0.5,-1.25\t2\t3
//! ```
//!
//! Rows are `index<TAB>features<TAB>true_label<TAB>noisy_label`. Floats are
//! written in shortest round-trip form, so reading back is bit-exact.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{NoiseMeta, NoisyDataset, Sample};
use crate::error::{Error, Result};

const MAGIC: &str = "# chimera-dataset 1";

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    dim: usize,
    len: usize,
    prior: Vec<f64>,
    noise: NoiseMeta,
}

pub fn write_dataset(ds: &NoisyDataset, mut w: impl Write) -> Result<()> {
    let header = Header {
        num_classes: ds.num_classes,
        dim: ds.dim(),
        len: ds.len(),
        prior: ds.prior.clone(),
        noise: ds.noise.clone(),
    };
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        use std::fmt::Write as _;
        write!(line, "{}\t", s.index).expect("string write");
        for (j, v) in s.features.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            write!(line, "{v:?}").expect("string write");
        }
        write!(line, "\t{}\t{}", s.true_label, s.noisy_label).expect("string write");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn read_dataset(r: impl BufRead) -> Result<NoisyDataset> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let first = lines.next().map(|(_, l)| l).transpose()?;
    if first.as_deref().map(str::trim_end) != Some(MAGIC) {
        return Err(parse_err(1, format!("expected `{MAGIC}`")));
    }
    let header: Header = match lines.next() {
        Some((n, l)) => serde_json::from_str(&l?).map_err(|e| parse_err(n, format!("bad header: {e}")))?,
        None => return Err(parse_err(2, "missing header")),
    };
    let mut samples = Vec::with_capacity(header.len);
    for (n, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                n,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|e| parse_err(n, format!("{what}: {e}")));
        let features = fields[1]
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(n, format!("feature `{v}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.len() != header.dim {
            return Err(parse_err(
                n,
                format!("expected {} features, got {}", header.dim, features.len()),
            ));
        }
        samples.push(Sample {
            index: int(fields[0], "index")?,
            features,
            true_label: int(fields[2], "true label")?,
            noisy_label: int(fields[3], "noisy label")?,
        });
    }
    if samples.len() != header.len {
        return Err(parse_err(
            0,
            format!("header declares {} rows, found {}", header.len, samples.len()),
        ));
    }
    NoisyDataset::new(samples, header.num_classes, header.prior, header.noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{inject_asymmetric, make_blobs, ClassPartition};

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = make_blobs(4, 20, 5, 2.7, 11).unwrap();
        let ds = inject_asymmetric(&ds, 0.4, &ClassPartition::pairs(4), 3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_dataset("hello\n".as_bytes()).is_err());
        let ds = make_blobs(2, 2, 2, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("\t1\t1", "\t1\t9");
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }
}
