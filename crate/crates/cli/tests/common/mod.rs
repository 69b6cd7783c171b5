#![allow(dead_code)]

use std::path::Path;

use adra_cli::ExperimentConfig;

/// A config small enough to run in a couple of seconds.
/// Keys in `extra` replace the default method list and seed count.
pub fn tiny_toml(experiment: &str, out: &Path, extra: &str) -> String {
    let mut head = extra.to_string();
    if !extra.contains("methods =") {
        head.push_str("\nmethods = [\"adra\", \"knn-ad\"]");
    }
    if !extra.contains("seeds =") {
        head.push_str("\nseeds = 1");
    }
    format!(
        r#"
experiment = "{experiment}"
output-dir = "{}"
{extra}

[data]
image-size = 16
train-per-class = 10
test-per-class = 5

[model]
channels = [8, 16]
blocks = 1
embedding-dim = 8

[train]
epochs = 1
batch-size = 16

[pretrain]
epochs = 1
train-per-class = 10
"#,
        out.display(),
        extra = head
    )
}

pub fn tiny(experiment: &str, out: &Path, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&tiny_toml(experiment, out, extra)).unwrap()
}
