//! Tool-execution environments behind a framed request/response protocol.
//!
//! A world is an explicit value; executing a call returns the next world
//! and an observation, and errors never change the world. A
//! [`SandboxManager`] owns one world per sandbox id and serves requests for
//! any number of sandboxes, in-process or over TCP ([`server`]).

pub mod calc;
pub mod code;
pub mod protocol;
pub mod retail;
pub mod server;

pub use code::{CodeWorkspace, HiddenTest};
pub use protocol::{RewardPayload, SandboxRequest, SandboxResponse};
pub use retail::RetailWorld;

use crate::model::{self, ErrorKind, ObsStatus, Observation, ToolCall};
use crate::registry::ToolRegistry;
use crate::value::Value;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

/// Tool name of the final request of a trajectory.
pub const SUBMIT_TOOL: &str = "submit";
/// Reserved tool that (re)initializes a sandbox from a task; args `{task_id}`.
pub const RESET_TOOL: &str = "__reset__";
/// Reserved tool that drops a sandbox.
pub const CLOSE_TOOL: &str = "__close__";

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("sandbox refused request: {0}")]
    Refused(String),
}

fn bad_args<W: Clone>(world: &W, tool: &str, expected: &str) -> (W, Observation) {
    (
        world.clone(),
        Observation::error(
            tool,
            ErrorKind::InvalidInput,
            format!("expected string argument(s) {expected}"),
        ),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskEnv {
    Retail {
        world: retail::Tables,
        goal: retail::Tables,
    },
    Code {
        files: BTreeMap<String, String>,
        entry: String,
        hidden_tests: Vec<HiddenTest>,
        step_budget: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Retail,
    Code,
}

/// A task fixture: instruction, scripted user turns, tools, environment, and
/// a reference solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    #[serde(default)]
    pub instruction: String,
    /// Scripted user messages; they are folded into the prompt in order.
    #[serde(default)]
    pub user_messages: Vec<String>,
    pub tools: ToolRegistry,
    pub env: TaskEnv,
    #[serde(default)]
    pub solution: Vec<ToolCall>,
}

impl Task {
    pub fn family(&self) -> TaskFamily {
        match self.env {
            TaskEnv::Retail { .. } => TaskFamily::Retail,
            TaskEnv::Code { .. } => TaskFamily::Code,
        }
    }

    pub fn prompt_text(&self) -> String {
        let mut parts = vec![self.instruction.clone()];
        parts.extend(self.user_messages.iter().cloned());
        parts.retain(|p| !p.is_empty());
        parts.join(" ")
    }

    pub fn initial_world(&self) -> Result<World, SandboxError> {
        match &self.env {
            TaskEnv::Retail { world, goal } => {
                Ok(World::Retail(RetailWorld::new(world.clone(), goal.clone())))
            }
            TaskEnv::Code {
                files,
                entry,
                hidden_tests,
                step_budget,
            } => CodeWorkspace::new(files.clone(), entry, hidden_tests.clone(), *step_budget)
                .map(World::Code)
                .ok_or_else(|| {
                    SandboxError::Fixture(format!("task {}: path escapes the workspace", self.id))
                }),
        }
    }

    /// Step budget declared by the task, if any.
    pub fn step_budget(&self) -> Option<usize> {
        match &self.env {
            TaskEnv::Code { step_budget, .. } => Some(*step_budget),
            TaskEnv::Retail { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum World {
    Retail(RetailWorld),
    Code(CodeWorkspace),
}

impl World {
    pub fn execute(&self, call: &ToolCall) -> (World, Observation) {
        match self {
            World::Retail(w) => {
                let (w, o) = w.execute(call);
                (World::Retail(w), o)
            }
            World::Code(w) => {
                let (w, o) = w.execute(call);
                (World::Code(w), o)
            }
        }
    }

    pub fn reward_payload(&self) -> RewardPayload {
        match self {
            World::Retail(w) => {
                let ok = w.verify_db();
                RewardPayload {
                    task_completed: ok,
                    pass_rate: if ok { 1.0 } else { 0.0 },
                }
            }
            World::Code(w) => {
                let rate = w.run_tests();
                RewardPayload {
                    task_completed: rate == 1.0,
                    pass_rate: rate,
                }
            }
        }
    }

    /// Hex SHA-256 of the canonical final state (tables, or the entry file text).
    pub fn digest(&self) -> String {
        let text = match self {
            World::Retail(w) => w.canonical_state(),
            World::Code(w) => w.files.get(&w.entry).cloned().unwrap_or_default(),
        };
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Executes a call against a task's registry and world.
pub fn execute_checked(
    registry: &ToolRegistry,
    world: &World,
    call: &ToolCall,
) -> (World, Observation) {
    let mut issues = Vec::new();
    model::call_issues(call, registry, &mut issues);
    if !issues.is_empty() {
        let msg = if registry.get(&call.tool_name).is_none() {
            format!("unknown tool {}", call.tool_name)
        } else {
            format!("arguments do not match the signature of {}", call.tool_name)
        };
        return (
            world.clone(),
            Observation::error(call.tool_name.clone(), ErrorKind::InvalidInput, msg),
        );
    }
    world.execute(call)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn from_json(text: &str) -> Result<Self, SandboxError> {
        let suite: TaskSuite =
            serde_json::from_str(text).map_err(|e| SandboxError::Fixture(e.to_string()))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SandboxError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| SandboxError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.id.as_str()) {
                return Err(SandboxError::Fixture(format!("duplicate task id {}", t.id)));
            }
            t.initial_world()?;
            for call in &t.solution {
                let mut issues = Vec::new();
                model::call_issues(call, &t.tools, &mut issues);
                if !issues.is_empty() {
                    return Err(SandboxError::Fixture(format!(
                        "task {}: solution call {} is invalid: {issues:?}",
                        t.id, call.tool_name
                    )));
                }
            }
        }
        if self.tasks.is_empty() {
            return Err(SandboxError::Fixture("suite has no tasks".into()));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

struct Sandbox {
    task: Arc<Task>,
    world: World,
}

/// Routes requests to per-sandbox worlds; each sandbox serves sequentially.
pub struct SandboxManager {
    tasks: HashMap<String, Arc<Task>>,
    sandboxes: RwLock<HashMap<String, Arc<Mutex<Sandbox>>>>,
}

fn response(id: u64, obs: Observation) -> SandboxResponse {
    SandboxResponse {
        request_id: id,
        status: obs.status,
        output: obs.payload,
        error_kind: obs.error_kind,
        reward_payload: None,
    }
}

fn refusal(id: u64, kind: ErrorKind, msg: String) -> SandboxResponse {
    SandboxResponse {
        request_id: id,
        status: ObsStatus::Error,
        output: msg,
        error_kind: Some(kind),
        reward_payload: None,
    }
}

impl SandboxManager {
    pub fn new(tasks: impl IntoIterator<Item = Task>) -> Self {
        let tasks = tasks
            .into_iter()
            .map(|t| (t.id.clone(), Arc::new(t)))
            .collect();
        Self {
            tasks,
            sandboxes: RwLock::new(HashMap::new()),
        }
    }

    pub fn live_sandboxes(&self) -> usize {
        self.sandboxes.read().len()
    }

    pub fn handle(&self, req: &SandboxRequest) -> SandboxResponse {
        let id = req.request_id;
        match req.tool.as_str() {
            RESET_TOOL => {
                let Some(task_id) = req.args.get("task_id").and_then(Value::as_str) else {
                    return refusal(id, ErrorKind::InvalidInput, "reset needs a task_id".into());
                };
                let Some(task) = self.tasks.get(task_id) else {
                    return refusal(id, ErrorKind::NotFound, format!("task {task_id} not found"));
                };
                match task.initial_world() {
                    Ok(world) => {
                        let sb = Sandbox {
                            task: task.clone(),
                            world,
                        };
                        self.sandboxes
                            .write()
                            .insert(req.sandbox_id.clone(), Arc::new(Mutex::new(sb)));
                        response(id, Observation::ok(RESET_TOOL, "ready"))
                    }
                    Err(e) => refusal(id, ErrorKind::Internal, e.to_string()),
                }
            }
            CLOSE_TOOL => {
                self.sandboxes.write().remove(&req.sandbox_id);
                response(id, Observation::ok(CLOSE_TOOL, "closed"))
            }
            _ => {
                let Some(sb) = self.sandboxes.read().get(&req.sandbox_id).cloned() else {
                    let mut r = refusal(
                        id,
                        ErrorKind::NotFound,
                        format!("sandbox {} not found", req.sandbox_id),
                    );
                    if req.is_final {
                        r.reward_payload = Some(RewardPayload {
                            task_completed: false,
                            pass_rate: 0.0,
                        });
                    }
                    return r;
                };
                let mut sb = sb.lock();
                if req.is_final {
                    let payload = sb.world.reward_payload();
                    let mut r = response(id, Observation::ok(SUBMIT_TOOL, sb.world.digest()));
                    r.reward_payload = Some(payload);
                    return r;
                }
                let call = ToolCall::new(req.tool.clone(), req.args.clone());
                let (next, obs) = execute_checked(&sb.task.tools, &sb.world, &call);
                sb.world = next;
                response(id, obs)
            }
        }
    }
}

pub trait SandboxEndpoint: Send {
    fn call(&mut self, req: &SandboxRequest) -> Result<SandboxResponse, SandboxError>;

    /// A request id not yet used on this endpoint's connection.
    fn next_request_id(&mut self) -> u64;
}

/// Calls a manager directly, without serialization.
#[derive(Clone)]
pub struct InProcessEndpoint {
    manager: Arc<SandboxManager>,
    next_id: u64,
}

impl InProcessEndpoint {
    pub fn new(manager: Arc<SandboxManager>) -> Self {
        Self {
            manager,
            next_id: 0,
        }
    }
}

impl SandboxEndpoint for InProcessEndpoint {
    fn call(&mut self, req: &SandboxRequest) -> Result<SandboxResponse, SandboxError> {
        Ok(self.manager.handle(req))
    }

    fn next_request_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }
}

/// One rollout's conversation with a sandbox.
pub struct SandboxSession<'e> {
    endpoint: &'e mut dyn SandboxEndpoint,
    sandbox_id: String,
}

impl<'e> SandboxSession<'e> {
    /// Opens a session by resetting `sandbox_id` to the task's initial world.
    pub fn open(
        endpoint: &'e mut dyn SandboxEndpoint,
        sandbox_id: impl Into<String>,
        task_id: &str,
    ) -> Result<Self, SandboxError> {
        let mut s = Self {
            endpoint,
            sandbox_id: sandbox_id.into(),
        };
        let r = s.request(
            RESET_TOOL,
            [("task_id".to_string(), Value::str(task_id))].into(),
            false,
        )?;
        if r.status != ObsStatus::Ok {
            return Err(SandboxError::Refused(r.output));
        }
        Ok(s)
    }

    fn request(
        &mut self,
        tool: &str,
        args: BTreeMap<String, Value>,
        is_final: bool,
    ) -> Result<SandboxResponse, SandboxError> {
        let request_id = self.endpoint.next_request_id();
        let req = SandboxRequest {
            request_id,
            sandbox_id: self.sandbox_id.clone(),
            tool: tool.to_owned(),
            args,
            is_final,
        };
        let resp = self.endpoint.call(&req)?;
        if resp.request_id != req.request_id {
            return Err(SandboxError::Refused(format!(
                "response id {} for request {}",
                resp.request_id, req.request_id
            )));
        }
        Ok(resp)
    }

    pub fn execute(&mut self, call: &ToolCall) -> Result<Observation, SandboxError> {
        let r = self.request(&call.tool_name, call.args.clone(), false)?;
        Ok(Observation {
            source_tool: call.tool_name.clone(),
            status: r.status,
            payload: r.output,
            error_kind: r.error_kind,
        })
    }

    /// Sends the final request; returns the state digest and the reward payload.
    pub fn submit(mut self) -> Result<(String, RewardPayload), SandboxError> {
        let r = self.request(SUBMIT_TOOL, BTreeMap::new(), true)?;
        let payload = r
            .reward_payload
            .ok_or_else(|| SandboxError::Refused("final response without reward payload".into()))?;
        let _ = self.request(CLOSE_TOOL, BTreeMap::new(), false);
        Ok((r.output, payload))
    }
}
