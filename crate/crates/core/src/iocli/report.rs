use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds to [`SIGNIFICANT_DIGITS`] significant digits; non-finite values pass through.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Shortest text of the rounded value; `NaN`/`inf` print as `NA`.
pub fn format_number(x: f64) -> String {
    let r = round_sig(x);
    if r.is_finite() {
        // -0 prints as 0
        format!("{}", r + 0.0)
    } else {
        "NA".into()
    }
}

fn number(x: f64) -> Value {
    Number::from_f64(round_sig(x) + 0.0).map_or(Value::Null, Value::Number)
}

/// One object of the results tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportNode(Map<String, Value>);

impl ReportNode {
    pub fn new() -> Self {
        Self::default()
    }

    /// A statistic with the name of the formula that produced it.
    pub fn stat(mut self, key: &str, value: f64, formula: &str) -> Self {
        self.0.insert(key.into(), leaf(number(value), formula));
        self
    }

    pub fn stat_opt(self, key: &str, value: Option<f64>, formula: &str) -> Self {
        match value {
            Some(v) => self.stat(key, v, formula),
            None => self.null(key, formula),
        }
    }

    pub fn count(mut self, key: &str, n: usize) -> Self {
        self.0.insert(key.into(), leaf(Value::Number(Number::from(n as u64)), "count"));
        self
    }

    /// A statistic that does not apply.
    pub fn null(mut self, key: &str, formula: &str) -> Self {
        self.0.insert(key.into(), leaf(Value::Null, formula));
        self
    }

    /// A vector of statistics sharing one formula.
    pub fn series(mut self, key: &str, values: &[f64], formula: &str) -> Self {
        self.0.insert(key.into(), leaf(Value::Array(values.iter().map(|&v| number(v)).collect()), formula));
        self
    }

    pub fn text(mut self, key: &str, value: impl Into<String>) -> Self {
        self.0.insert(key.into(), Value::String(value.into()));
        self
    }

    pub fn texts(mut self, key: &str, values: &[String]) -> Self {
        self.0.insert(key.into(), Value::Array(values.iter().cloned().map(Value::String).collect()));
        self
    }

    pub fn flag(mut self, key: &str, value: bool) -> Self {
        self.0.insert(key.into(), Value::Bool(value));
        self
    }

    pub fn child(mut self, key: &str, node: ReportNode) -> Self {
        self.0.insert(key.into(), Value::Object(node.0));
        self
    }

    pub fn children(mut self, key: &str, nodes: Vec<ReportNode>) -> Self {
        self.0.insert(key.into(), Value::Array(nodes.into_iter().map(|n| Value::Object(n.0)).collect()));
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

fn leaf(value: Value, formula: &str) -> Value {
    let mut m = Map::new();
    m.insert("value".into(), value);
    m.insert("formula".into(), Value::String(formula.into()));
    Value::Object(m)
}

/// Machine-readable output of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportDocument {
    pub command: String,
    /// Hex SHA-256 of the input bytes.
    pub input_digest: Option<String>,
    /// Effective options, as strings.
    pub config: Vec<(String, String)>,
    pub results: ReportNode,
}

impl ReportDocument {
    pub fn new(command: &str, input: Option<&[u8]>, config: Vec<(String, String)>, results: ReportNode) -> Self {
        Self { command: command.into(), input_digest: input.map(digest), config, results }
    }

    pub fn to_value(&self) -> Value {
        let mut tool = Map::new();
        tool.insert("name".into(), Value::String(env!("CARGO_PKG_NAME").into()));
        tool.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        let config: Map<String, Value> = self.config.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        let mut root = Map::new();
        root.insert("tool".into(), Value::Object(tool));
        root.insert("command".into(), Value::String(self.command.clone()));
        root.insert("input_sha256".into(), self.input_digest.clone().map_or(Value::Null, Value::String));
        root.insert("config".into(), Value::Object(config));
        root.insert("results".into(), self.results.clone().into_value());
        Value::Object(root)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("JSON values always serialize");
        s.push('\n');
        s
    }

    /// One `path<TAB>value<TAB>formula` line per statistic.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("path\tvalue\tformula\n");
        flatten(&self.results.clone().into_value(), String::new(), &mut out);
        out
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_leaf(m: &Map<String, Value>) -> bool {
    m.len() == 2 && m.contains_key("value") && matches!(m.get("formula"), Some(Value::String(_)))
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "NA".into(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Object(_) => String::new(),
    }
}

fn flatten(v: &Value, path: String, out: &mut String) {
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match v {
        Value::Object(m) if is_leaf(m) => {
            out.push_str(&format!("{path}\t{}\t{}\n", render(&m["value"]), render(&m["formula"])));
        }
        Value::Object(m) => m.iter().for_each(|(k, c)| flatten(c, join(k), out)),
        Value::Array(a) if a.iter().any(Value::is_object) => {
            a.iter().enumerate().for_each(|(i, c)| flatten(c, join(&i.to_string()), out))
        }
        other => out.push_str(&format!("{path}\t{}\t\n", render(other))),
    }
}

/// Paths of numeric leaves not wrapped in a `{value, formula}` object.
pub fn untagged_numbers(v: &Value) -> Vec<String> {
    fn walk(v: &Value, path: &str, out: &mut Vec<String>) {
        match v {
            Value::Number(_) => out.push(path.to_string()),
            Value::Object(m) if is_leaf(m) => {}
            Value::Object(m) => m.iter().for_each(|(k, c)| walk(c, &format!("{path}/{k}"), out)),
            Value::Array(a) => a.iter().enumerate().for_each(|(i, c)| walk(c, &format!("{path}/{i}"), out)),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}
