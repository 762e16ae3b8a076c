use crate::CliError;
use agentrl::merge::MergeConfig;
use agentrl::orchestrator::{warm_start, OrchestratorConfig, PromptSource, TaskPool};
use agentrl::policy::{PolicyMeta, PolicyParams};
use agentrl::sandbox::{Task, TaskSuite};
use agentrl::tts::{SelectConfig, DEFAULT_TOP_K};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Name referenced by the task cycle.
    pub name: String,
    pub fixture: PathBuf,
    /// Expand every task into one single-turn item per reference step.
    #[serde(default)]
    pub stepwise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStart {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            iterations: 0,
            learning_rate: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    #[default]
    Simulated,
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub suites: Vec<SuiteConfig>,
    pub orchestrator: OrchestratorConfig,
    pub merge: MergeConfig,
    pub select: SelectConfig,
    pub top_k: usize,
    pub policy: PolicyMeta,
    pub init_checkpoint: Option<PathBuf>,
    pub warm_start: WarmStart,
    pub driver: Driver,
    /// Updates between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_interval: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suites: vec![],
            orchestrator: OrchestratorConfig::default(),
            merge: MergeConfig::default(),
            select: SelectConfig::default(),
            top_k: DEFAULT_TOP_K,
            policy: PolicyMeta {
                features: 8192,
                vocab: 128,
                context_window: 64,
            },
            init_checkpoint: None,
            warm_start: WarmStart::default(),
            driver: Driver::Simulated,
            checkpoint_interval: 10,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Relative paths inside the file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.suites.iter_mut().for_each(|s| resolve(&mut s.fixture));
        if let Some(p) = cfg.init_checkpoint.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn load_suites(&self) -> Result<Vec<(SuiteConfig, Vec<Task>)>, CliError> {
        if self.suites.is_empty() {
            return Err(CliError::Config("no task suites configured".into()));
        }
        self.suites
            .iter()
            .map(|s| Ok((s.clone(), TaskSuite::load(&s.fixture)?.tasks)))
            .collect()
    }

    pub fn initial_params(
        &self,
        suites: &[(SuiteConfig, Vec<Task>)],
    ) -> Result<PolicyParams, CliError> {
        let params = match &self.init_checkpoint {
            Some(p) => PolicyParams::load(p)?,
            None => PolicyParams::zeros(self.policy),
        };
        if self.warm_start.iterations == 0 {
            return Ok(params);
        }
        let tasks: Vec<Arc<Task>> = suites
            .iter()
            .flat_map(|(_, ts)| ts.iter().cloned().map(Arc::new))
            .collect();
        Ok(warm_start(
            &params,
            &tasks,
            self.warm_start.iterations,
            self.warm_start.learning_rate,
        )?)
    }

    pub fn pool(
        &self,
        suites: &[(SuiteConfig, Vec<Task>)],
        params: &PolicyParams,
    ) -> Result<TaskPool, CliError> {
        let mut pool = TaskPool::new();
        for (s, tasks) in suites {
            if s.stepwise {
                let mut sources = Vec::new();
                for t in tasks {
                    sources.extend(PromptSource::stepwise_from(&Arc::new(t.clone()), params)?);
                }
                pool.insert(s.name.clone(), sources);
            } else {
                pool.insert_episodes(s.name.clone(), tasks.clone());
            }
        }
        pool.check_cycle(&self.orchestrator.task_cycle)?;
        Ok(pool)
    }
}

/// Holds `<dir>/.lock` for the lifetime of a command.
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}
