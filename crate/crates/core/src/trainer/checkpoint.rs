//! Plain-text parameter checkpoints.
//!
//! ```text
//! rangekit-checkpoint 1
//! shape <d_in> <d_emb> <n_classes> [<hidden>...]
//! tensor <name> <len>
//! <value> <value> ...
//! ...
//! end
//! ```
//!
//! Values are written with 17 significant digits, so an `f64` parameter set
//! reads back bit-exactly. The trailing `end` line guards against truncation.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{MlpParams, NetworkShape};
use crate::scalar::Scalar;

const MAGIC: &str = "rangekit-checkpoint 1";
const VALUES_PER_LINE: usize = 8;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &MlpParams<T>, mut w: W) -> std::io::Result<()> {
    let shape = params.shape();
    writeln!(w, "{MAGIC}")?;
    let mut line = format!("shape {} {} {}", shape.d_in, shape.d_emb, shape.n_classes);
    for h in &shape.hidden {
        write!(line, " {h}").expect("string write");
    }
    writeln!(w, "{line}")?;
    for (name, tensor) in params.tensor_names().iter().zip(params.tensors()) {
        writeln!(w, "tensor {name} {}", tensor.len())?;
        for chunk in tensor.chunks(VALUES_PER_LINE) {
            line.clear();
            for (i, v) in chunk.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{:.16e}", v.as_f64()).expect("string write");
            }
            writeln!(w, "{line}")?;
        }
    }
    writeln!(w, "end")
}

pub fn save_checkpoint<T: Scalar>(params: &MlpParams<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Lines<R> {
    inner: std::iter::Enumerate<std::io::Lines<R>>,
    source: String,
    last: usize,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.clone(),
            line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, String)> {
        match self.inner.next() {
            Some((i, Ok(l))) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            Some((i, Err(e))) => Err(self.err(i + 1, e.to_string())),
            None => Err(self.err(self.last + 1, "unexpected end of file")),
        }
    }
}

fn parse_usize(tok: Option<&str>, what: &str, line: usize, lines: &Lines<impl BufRead>) -> Result<usize> {
    tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?
        .parse()
        .map_err(|e| lines.err(line, format!("{what}: {e}")))
}

/// Parses a checkpoint. Any malformed or truncated input is an error; no
/// partially filled parameters are returned.
pub fn read_checkpoint<T: Scalar, R: BufRead>(r: R, source_name: &str) -> Result<MlpParams<T>> {
    let mut lines = Lines {
        inner: r.lines().enumerate(),
        source: source_name.to_string(),
        last: 0,
    };
    let (n, magic) = lines.next_line()?;
    if magic.trim() != MAGIC {
        return Err(lines.err(n, format!("expected '{MAGIC}'")));
    }

    let (n, shape_line) = lines.next_line()?;
    let mut toks = shape_line.split_whitespace();
    if toks.next() != Some("shape") {
        return Err(lines.err(n, "expected 'shape'"));
    }
    let d_in = parse_usize(toks.next(), "d_in", n, &lines)?;
    let d_emb = parse_usize(toks.next(), "d_emb", n, &lines)?;
    let n_classes = parse_usize(toks.next(), "n_classes", n, &lines)?;
    let hidden = toks
        .map(|t| parse_usize(Some(t), "hidden width", n, &lines))
        .collect::<Result<Vec<_>>>()?;
    let shape = NetworkShape {
        d_in,
        hidden,
        d_emb,
        n_classes,
    };
    let mut params = MlpParams::<T>::zeros(&shape).map_err(|e| lines.err(n, e.to_string()))?;
    let names = params.tensor_names();

    for (name, tensor) in names.iter().zip(params.tensors_mut()) {
        let (n, header) = lines.next_line()?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("tensor") || toks.next() != Some(name.as_str()) {
            return Err(lines.err(n, format!("expected 'tensor {name}'")));
        }
        let len = parse_usize(toks.next(), "tensor length", n, &lines)?;
        if len != tensor.len() {
            return Err(lines.err(n, format!("{name} has {len} values, shape implies {}", tensor.len())));
        }
        let mut filled = 0;
        while filled < len {
            let (n, row) = lines.next_line()?;
            for tok in row.split_whitespace() {
                if filled == len {
                    return Err(lines.err(n, format!("too many values for {name}")));
                }
                let v: f64 = tok.parse().map_err(|e| lines.err(n, format!("value '{tok}': {e}")))?;
                tensor[filled] = T::lit(v);
                filled += 1;
            }
        }
    }
    let (n, end) = lines.next_line()?;
    if end.trim() != "end" {
        return Err(lines.err(n, "expected 'end'"));
    }
    Ok(params)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MlpParams<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    fn params() -> MlpParams<f64> {
        let shape = NetworkShape {
            d_in: 5,
            hidden: vec![6, 3],
            d_emb: 4,
            n_classes: 7,
        };
        let mut p: MlpParams<f64> = init_params(&shape, 77).unwrap();
        p.layers[0].bias[2] = -1.0 / 3.0;
        p.classifier.bias[0] = 1e-300;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back: MlpParams<f64> = read_checkpoint(buf.as_slice(), "mem").unwrap();
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            let a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&params(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for cut in [text.len() / 3, text.len() / 2, text.len() - 4] {
            let err = read_checkpoint::<f64, _>(&text.as_bytes()[..cut], "mem").unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "{err}");
        }
    }

    #[test]
    fn corrupt_value_reports_line() {
        let mut buf = Vec::new();
        write_checkpoint(&params(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("e-", "q-", 1);
        let line = text.lines().position(|l| l.contains("q-")).unwrap() + 1;
        match read_checkpoint::<f64, _>(text.as_bytes(), "mem") {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn f32_round_trip() {
        let p: MlpParams<f32> = init_params(&params().shape(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back: MlpParams<f32> = read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(p, back);
    }
}
