use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Default label set; examples may carry their own.
    #[serde(default)]
    pub labels: Vec<String>,
    pub language: String,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "yes")]
    pub seen_in_training: bool,
}

fn default_template() -> String {
    "default".into()
}
fn yes() -> bool {
    true
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.kind == TaskKind::Classification && self.labels.len() < 2 {
            return Err(EvalError::Invalid(format!("classification task `{}` needs at least two labels", self.name)));
        }
        Ok(())
    }

    /// Label set of one example.
    pub fn labels_for<'a>(&'a self, ex: &'a TaskExample) -> &'a [String] {
        ex.labels.as_deref().unwrap_or(&self.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub gold: String,
}

/// Expected accuracy of uniform guessing over the task's label set.
pub fn random_baseline(task: &TaskSpec) -> Result<f64, EvalError> {
    match task.kind {
        TaskKind::Generation => Err(EvalError::NoBaseline(task.name.clone())),
        TaskKind::Classification => {
            task.validate()?;
            Ok(1.0 / task.labels.len() as f64)
        }
    }
}

/// Mean over examples of `1 / |labels|`, reading each example's own option
/// count when it has one.
pub fn random_baseline_examples(task: &TaskSpec, examples: &[TaskExample]) -> Result<f64, EvalError> {
    if task.kind == TaskKind::Generation {
        return Err(EvalError::NoBaseline(task.name.clone()));
    }
    if examples.is_empty() {
        return random_baseline(task);
    }
    let mut sum = 0.0;
    for ex in examples {
        let n = task.labels_for(ex).len();
        if n < 2 {
            return Err(EvalError::Invalid(format!("example of `{}` has fewer than two labels", task.name)));
        }
        sum += 1.0 / n as f64;
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub examples: Vec<TaskExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    #[serde(flatten)]
    pub spec: TaskSpec,
    /// JSON-lines dataset, relative to the suite file.
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub tasks: Vec<SuiteEntry>,
}

pub fn parse_examples(text: &str, task: &str) -> Result<Vec<TaskExample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| EvalError::Invalid(format!("task `{task}` line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a suite file and every dataset it names.
pub fn load_suite(path: &Path) -> Result<Vec<TaskData>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    let suite: TaskSuite =
        serde_json::from_str(&text).map_err(|e| EvalError::Invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in suite.tasks {
        entry.spec.validate()?;
        let p = base.join(&entry.data);
        let data = std::fs::read_to_string(&p)
            .map_err(|_| EvalError::MissingDataset { task: entry.spec.name.clone(), path: p.display().to_string() })?;
        let examples = parse_examples(&data, &entry.spec.name)?;
        out.push(TaskData { spec: entry.spec, examples });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, labels: &[&str]) -> TaskSpec {
        TaskSpec {
            name: "t".into(),
            kind,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            language: "fa".into(),
            template: default_template(),
            seen_in_training: true,
        }
    }

    #[test]
    fn baselines() {
        assert_eq!(random_baseline(&spec(TaskKind::Classification, &["a", "b", "c", "d"])).unwrap(), 0.25);
        assert_eq!(random_baseline(&spec(TaskKind::Classification, &["a", "b"])).unwrap(), 0.5);
        assert!((random_baseline(&spec(TaskKind::Classification, &["a", "b", "c"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(random_baseline(&spec(TaskKind::Generation, &[])), Err(EvalError::NoBaseline(_))));
        assert!(random_baseline(&spec(TaskKind::Classification, &["a"])).is_err());
    }

    #[test]
    fn per_example_option_counts() {
        let s = spec(TaskKind::Classification, &["a", "b", "c", "d"]);
        let ex = |labels: Option<Vec<&str>>| TaskExample {
            instruction: "q".into(),
            input: String::new(),
            labels: labels.map(|l| l.into_iter().map(String::from).collect()),
            gold: "a".into(),
        };
        let exs = vec![ex(None), ex(Some(vec!["a", "b"]))];
        assert!((random_baseline_examples(&s, &exs).unwrap() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn missing_dataset_names_task() {
        let dir = tempfile::tempdir().unwrap();
        let suite = dir.path().join("suite.json");
        std::fs::write(
            &suite,
            r#"{"tasks":[{"name":"Entailment","kind":"classification","labels":["yes","no","maybe"],"language":"en","data":"nope.jsonl"}]}"#,
        )
        .unwrap();
        let err = load_suite(&suite).unwrap_err();
        assert!(err.to_string().contains("Entailment"), "{err}");
    }
}
