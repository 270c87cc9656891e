//! Report rendering: aligned text for people, `key<TAB>value` lines for
//! scripts.

use std::fmt::Write;

/// Shortest-trimmed rendering with 17 significant digits, so every value
/// parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn join_f64(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

pub fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

#[derive(Default)]
pub struct Report {
    /// Scalar fields, printed as `key  value` or `key\tvalue`.
    fields: Vec<(String, String)>,
    table: Option<Table>,
    /// Replaces the text rendering when set.
    text: Option<String>,
}

struct Table {
    /// Porcelain key prefix; row `r` prints as `{prefix}.{id}.{column}`.
    prefix: String,
    headers: Vec<String>,
    rows: Vec<(String, Vec<String>)>,
}

impl Report {
    pub fn field(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.field(key, fmt_f64(value))
    }

    pub fn table(&mut self, prefix: &str, headers: &[&str]) -> &mut Self {
        self.table = Some(Table {
            prefix: prefix.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        });
        self
    }

    /// `id` names the row in porcelain output; in text mode the cells are
    /// printed under the headers.
    pub fn row(&mut self, id: impl ToString, cells: Vec<String>) -> &mut Self {
        let t = self.table.as_mut().expect("table() before row()");
        debug_assert_eq!(cells.len(), t.headers.len());
        t.rows.push((id.to_string(), cells));
        self
    }

    pub fn text(&mut self, text: String) -> &mut Self {
        self.text = Some(text);
        self
    }

    pub fn render(&self, porcelain: bool) -> String {
        if let (false, Some(t)) = (porcelain, &self.text) {
            return format!("{t}\n");
        }
        let mut out = String::new();
        if porcelain {
            for (k, v) in &self.fields {
                writeln!(out, "{k}\t{v}").unwrap();
            }
            if let Some(t) = &self.table {
                for (id, cells) in &t.rows {
                    for (h, c) in t.headers.iter().zip(cells) {
                        writeln!(out, "{}.{id}.{h}\t{c}", t.prefix).unwrap();
                    }
                }
            }
            return out;
        }
        let kw = self.fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.fields {
            writeln!(out, "{k:<kw$}  {v}").unwrap();
        }
        if let Some(t) = &self.table {
            if !self.fields.is_empty() {
                out.push('\n');
            }
            let mut widths: Vec<usize> = t.headers.iter().map(String::len).collect();
            for (_, cells) in &t.rows {
                for (w, c) in widths.iter_mut().zip(cells) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cells: &[String]| -> String {
                let s: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
                s.join("  ")
            };
            writeln!(out, "{}", line(&t.headers)).unwrap();
            for (_, cells) in &t.rows {
                writeln!(out, "{}", line(cells)).unwrap();
            }
        }
        out
    }
}
