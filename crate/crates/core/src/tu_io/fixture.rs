//! Single-file, line-oriented dataset fixtures for tests.
//!
//! ```text
//! N C d
//! n m label          (per graph)
//! f_1 ... f_d        (n rows, space-separated reals)
//! i j                (m rows, 0-based, i < j)
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{Dataset, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_fixture(mut w: impl Write, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", dataset.len(), dataset.num_classes, dataset.feature_dim);
    for g in &dataset.graphs {
        let _ = writeln!(out, "{} {} {}", g.node_count, g.edges.len(), g.label);
        for row in 0..g.node_count {
            let cells: Vec<String> = (0..g.feature_dim())
                .map(|c| format!("{:?}", g.features.at(row, c)))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        for &(a, b) in &g.edges {
            let _ = writeln!(out, "{a} {b}");
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_fixture(r: impl BufRead, name: &str) -> Result<Dataset> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut pos = 0;
    let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
        let line = lines
            .get(pos)
            .ok_or_else(|| Error::MalformedDataset(format!("fixture ends early, expected {what}")))?;
        pos += 1;
        Ok((pos, line.split_whitespace().map(str::to_string).collect()))
    };
    let bad = |line: usize, msg: String| Error::Parse {
        file: format!("<fixture {name}>").into(),
        line,
        msg,
    };
    let ints = |line: usize, fields: &[String], want: usize| -> Result<Vec<usize>> {
        if fields.len() != want {
            return Err(bad(line, format!("expected {want} integers")));
        }
        fields
            .iter()
            .map(|f| f.parse().map_err(|_| bad(line, format!("expected an integer, found {f:?}"))))
            .collect()
    };

    let (line, header) = next("header")?;
    let h = ints(line, &header, 3)?;
    let (count, classes, d) = (h[0], h[1], h[2]);
    let mut graphs = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, fields) = next("graph header")?;
        let gh = ints(line, &fields, 3)?;
        let (n, m, label) = (gh[0], gh[1], gh[2]);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (line, fields) = next("feature row")?;
            if fields.len() != d {
                return Err(bad(line, format!("expected {d} features")));
            }
            for f in &fields {
                data.push(f.parse::<f64>().map_err(|_| bad(line, format!("expected a real, found {f:?}")))?);
            }
        }
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (line, fields) = next("edge row")?;
            let e = ints(line, &fields, 2)?;
            edges.push((e[0], e[1]));
        }
        graphs.push(Graph::new(n, edges, Tensor::new(&[n, d], data), label)?);
    }
    let mut ds = Dataset::new(name, graphs, classes)?;
    ds.feature_dim = d;
    Ok(ds)
}
