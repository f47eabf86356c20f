//! Delimited-text and JSON output with a fixed numeric format.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MicroState;
use crate::truth::SimulationTrace;

/// Formats with 12 significant digits, plain notation for moderate
/// magnitudes and exponent notation otherwise. Trailing zeros are dropped.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.11e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..15).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

/// Column-ordered table of preformatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// One row per (step, node).
pub fn trace_table(trace: &SimulationTrace) -> Table {
    let mut t = Table::new(&["t", "node_id", "p", "q", "p_inj", "q_inj", "v", "s", "method"]);
    for step in &trace.steps {
        for (j, id) in trace.node_ids.iter().enumerate() {
            t.push(vec![
                fmt_num(step.time),
                id.clone(),
                fmt_num(step.p[j]),
                fmt_num(step.q[j]),
                fmt_num(step.p_inj[j]),
                fmt_num(step.q_inj[j]),
                fmt_num(step.v[j]),
                u8::from(step.config.is_on(j)).to_string(),
                step.method.as_str().to_string(),
            ]);
        }
    }
    t
}

/// One row per (window, node); `window_start` is the time of the first step.
pub fn lambda_table(trace: &SimulationTrace, window: usize, states: &[MicroState]) -> Table {
    let mut t = Table::new(&["window_start", "node_id", "lambda"]);
    for (w, state) in states.iter().enumerate() {
        let start = trace.steps[w * window].time;
        for (j, id) in trace.node_ids.iter().enumerate() {
            t.push(vec![fmt_num(start), id.clone(), fmt_num(state.lambda()[j])]);
        }
    }
    t
}
