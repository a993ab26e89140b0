//! Plan, code and debug agents.
//!
//! Each agent call is a single system+user exchange. The user text is the
//! frame template with the reference architecture, the focus node, the
//! rendered history blocks and the role instruction substituted in.

pub mod provider;
pub mod simulated;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{self, AnchoredScaffold, ScaffoldError};
use crate::templates::{self, TemplateError, Templates};
use crate::tree::{NodeId, SearchTree};
use crate::window::{self, ContextWindow, Role, WindowError};

pub use provider::{CompletionRequest, CompletionResponse, Provider, ProviderError};

/// Call kinds used in request tags and audit file names.
pub const KIND_PLAN: &str = "plan";
pub const KIND_CODE: &str = "code";
pub const KIND_DEBUG: &str = "debug";
pub const KIND_SAMPLE: &str = "sample";
pub const KIND_REFLECT: &str = "reflect";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRole {
    pub name: Role,
    pub temperature: f64,
    pub model_id: String,
    pub max_output_tokens: u32,
    pub template_id: String,
}

impl AgentRole {
    pub fn default_for(role: Role) -> Self {
        let (temperature, template_id) = match role {
            Role::Plan => (0.8, templates::INSTR_PLAN),
            Role::Code => (0.1, templates::INSTR_CODE),
            Role::Debug => (0.1, templates::INSTR_DEBUG),
        };
        Self {
            name: role,
            temperature,
            model_id: "default".to_string(),
            max_output_tokens: 8192,
            template_id: template_id.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("{} temperature must be >= 0", self.name));
        }
        if self.max_output_tokens == 0 {
            return Err(format!("{} max_output_tokens must be positive", self.name));
        }
        if !templates::FILE_NAMES.contains(&self.template_id.as_str()) {
            return Err(format!(
                "{} template_id {} is not a known template",
                self.name, self.template_id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSet {
    pub plan: AgentRole,
    pub code: AgentRole,
    pub debug: AgentRole,
}

impl Default for RoleSet {
    fn default() -> Self {
        Self {
            plan: AgentRole::default_for(Role::Plan),
            code: AgentRole::default_for(Role::Code),
            debug: AgentRole::default_for(Role::Debug),
        }
    }
}

impl RoleSet {
    pub fn get(&self, role: Role) -> &AgentRole {
        match role {
            Role::Plan => &self.plan,
            Role::Code => &self.code,
            Role::Debug => &self.debug,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for role in Role::ALL {
            let r = self.get(role);
            if r.name != role {
                return Err(format!("role entry {role} is named {}", r.name));
            }
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Error)]
pub enum AgentFailure {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{0}")]
    Parse(String),
    #[error("prompt assembly failed: {0}")]
    Prompt(String),
}

impl AgentFailure {
    pub fn is_parse(&self) -> bool {
        matches!(self, AgentFailure::Parse(_))
    }
}

impl From<ScaffoldError> for AgentFailure {
    fn from(e: ScaffoldError) -> Self {
        AgentFailure::Parse(e.to_string())
    }
}

impl From<TemplateError> for AgentFailure {
    fn from(e: TemplateError) -> Self {
        AgentFailure::Prompt(e.to_string())
    }
}

impl From<WindowError> for AgentFailure {
    fn from(e: WindowError) -> Self {
        AgentFailure::Prompt(e.to_string())
    }
}

/// Instruction text for a role, without its terminating newlines.
pub fn instruction(role: Role, templates: &Templates) -> &str {
    let text = match role {
        Role::Plan => &templates.instr_plan,
        Role::Code => &templates.instr_code,
        Role::Debug => &templates.instr_debug,
    };
    window::trim_text(text)
}

/// Fill the frame. `focus_text` goes into the latest-attempt slot and
/// `history_text` (already rendered, possibly empty) follows it.
pub fn assemble_prompt(
    instruction: &str,
    focus_text: &str,
    history_text: &str,
    reference_source: &str,
    templates: &Templates,
) -> Result<Prompt, TemplateError> {
    let parts = templates.frame_parts()?;
    let system_text = window::trim_text(&templates.system).to_string();
    let system_slot = format!("{}\n\n", templates::PH_SYSTEM);
    let intro = match parts.intro.strip_prefix(&system_slot) {
        Some(rest) => templates::fill(
            rest,
            &[
                (
                    templates::PH_EXAMPLE_ARCH,
                    window::trim_text(&templates.example_arch),
                ),
                (
                    templates::PH_EXAMPLE_NEW_ARCH,
                    window::trim_text(&templates.example_new_arch),
                ),
                (templates::PH_ARCH, window::trim_text(reference_source)),
            ],
        ),
        // a custom frame that places the system message elsewhere
        None => templates::fill(
            &parts.intro,
            &[
                (templates::PH_SYSTEM, &system_text),
                (
                    templates::PH_EXAMPLE_ARCH,
                    window::trim_text(&templates.example_arch),
                ),
                (
                    templates::PH_EXAMPLE_NEW_ARCH,
                    window::trim_text(&templates.example_new_arch),
                ),
                (templates::PH_ARCH, window::trim_text(reference_source)),
            ],
        ),
    };
    let mut user_text = intro;
    user_text.push_str(&templates::fill(
        &parts.latest,
        &[(templates::PH_FOCUS, window::trim_text(focus_text))],
    ));
    user_text.push_str(history_text);
    user_text.push_str(&templates::fill(
        &parts.tail,
        &[(templates::PH_INSTRUCTION, instruction)],
    ));
    Ok(Prompt {
        system_text,
        user_text,
    })
}

/// Plan prompt: the focus node with its observations, plus the window.
pub fn plan_prompt(
    window: &ContextWindow,
    tree: &SearchTree,
    templates: &Templates,
) -> Result<Prompt, AgentFailure> {
    plan_or_debug(Role::Plan, window, tree, templates)
}

/// Code prompt: the plan advice and annotated scaffold take the focus slot.
pub fn code_prompt(
    window: &ContextWindow,
    tree: &SearchTree,
    scaffold: &AnchoredScaffold,
    templates: &Templates,
) -> Result<Prompt, AgentFailure> {
    let history = window::render_history(window, tree, templates)?;
    let focus = format!(
        "{}\n\n{}",
        window::trim_text(&scaffold.advice),
        window::trim_text(&scaffold.text)
    );
    Ok(assemble_prompt(
        instruction(Role::Code, templates),
        &focus,
        &history,
        &tree.root_node().kernel_source,
        templates,
    )?)
}

/// Debug prompt: the buggy node with its logs, plus its siblings.
pub fn debug_prompt(
    window: &ContextWindow,
    tree: &SearchTree,
    templates: &Templates,
) -> Result<Prompt, AgentFailure> {
    plan_or_debug(Role::Debug, window, tree, templates)
}

fn plan_or_debug(
    role: Role,
    window: &ContextWindow,
    tree: &SearchTree,
    templates: &Templates,
) -> Result<Prompt, AgentFailure> {
    let focus = tree.get(window.focus).map_err(WindowError::from)?;
    let history = window::render_history(window, tree, templates)?;
    Ok(assemble_prompt(
        instruction(role, templates),
        &window::focus_text(focus, templates)?,
        &history,
        &tree.root_node().kernel_source,
        templates,
    )?)
}

/// One-shot prompt around a single node and no history. Used by the
/// baselines: the root for independent samples, the previous attempt for
/// the refinement chain.
pub fn single_node_prompt(
    tree: &SearchTree,
    node: NodeId,
    templates: &Templates,
) -> Result<Prompt, AgentFailure> {
    let focus = tree.get(node).map_err(WindowError::from)?;
    Ok(assemble_prompt(
        instruction(Role::Code, templates),
        &window::focus_text(focus, templates)?,
        "",
        &tree.root_node().kernel_source,
        templates,
    )?)
}

/// Last fenced block that defines `ModelNew`, with marker lines removed.
pub fn extract_final_code(llm_text: &str) -> Result<String, AgentFailure> {
    let blocks = anchors::fenced_blocks(llm_text);
    if blocks.is_empty() {
        return Err(AgentFailure::Parse("no code block".into()));
    }
    blocks
        .iter()
        .rev()
        .find(|b| b.contains("ModelNew"))
        .map(|b| anchors::strip_markers(b))
        .ok_or_else(|| AgentFailure::Parse("no ModelNew definition found".into()))
}

/// True when `code` changes lines that lie before the first or after the
/// last marked region of the scaffold.
pub fn edits_outside_regions(scaffold: &AnchoredScaffold, code: &str) -> bool {
    let (Some(first), Some(last)) = (scaffold.regions.first(), scaffold.regions.last()) else {
        return false;
    };
    let lines: Vec<&str> = scaffold.text.lines().collect();
    let norm = |ls: &[&str]| -> Vec<String> {
        ls.iter()
            .filter(|l| !anchors::is_marker_line(l))
            .map(|l| l.trim_end().to_string())
            .collect()
    };
    let head = norm(&lines[..first.start_line.saturating_sub(1).min(lines.len())]);
    let tail = norm(&lines[last.end_line.min(lines.len())..]);
    let out: Vec<String> = code.lines().map(|l| l.trim_end().to_string()).collect();
    let strip_blank = |v: &[String]| -> Vec<String> {
        let s = v.iter().position(|l| !l.is_empty()).unwrap_or(v.len());
        let e = v.iter().rposition(|l| !l.is_empty()).map_or(s, |i| i + 1);
        v[s..e.max(s)].to_vec()
    };
    let head = strip_blank(&head);
    let tail = strip_blank(&tail);
    let body = strip_blank(&out);
    if head.len() + tail.len() > body.len() {
        return true;
    }
    body[..head.len()] != head[..] || body[body.len() - tail.len()..] != tail[..]
}

/// Audit record of one provider call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub attempt: usize,
    pub kind: String,
    pub request: CompletionRequest,
    pub response: Option<CompletionResponse>,
    pub error: Option<String>,
}

impl CallRecord {
    /// `NNN_kind.json`
    pub fn file_name(&self) -> String {
        format!("{:03}_{}.json", self.attempt, self.kind)
    }
}

/// Issues agent calls for one run and keeps their audit records.
pub struct AgentRunner<'a> {
    pub provider: &'a dyn Provider,
    pub roles: &'a RoleSet,
    pub templates: &'a Templates,
    pub run_id: String,
    /// Temperature of the baseline agents' one-shot generations.
    pub baseline_temperature: f64,
    calls: Vec<CallRecord>,
}

impl<'a> AgentRunner<'a> {
    pub fn new(
        provider: &'a dyn Provider,
        roles: &'a RoleSet,
        templates: &'a Templates,
        run_id: impl Into<String>,
    ) -> Self {
        Self {
            provider,
            roles,
            templates,
            run_id: run_id.into(),
            baseline_temperature: 0.7,
            calls: Vec::new(),
        }
    }

    /// Audit records accumulated since the last call to this method.
    pub fn take_calls(&mut self) -> Vec<CallRecord> {
        std::mem::take(&mut self.calls)
    }

    fn call(
        &mut self,
        role: &AgentRole,
        temperature: f64,
        kind: &str,
        attempt: usize,
        prompt: Prompt,
    ) -> Result<CompletionResponse, AgentFailure> {
        let request = CompletionRequest {
            model_id: role.model_id.clone(),
            system_text: prompt.system_text,
            user_text: prompt.user_text,
            temperature,
            max_output_tokens: role.max_output_tokens,
            request_tag: provider::make_tag(&self.run_id, attempt, kind),
        };
        let result = self.provider.complete(&request);
        self.calls.push(CallRecord {
            attempt,
            kind: kind.to_string(),
            request,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        Ok(result?)
    }

    pub fn plan_step(
        &mut self,
        window: &ContextWindow,
        tree: &SearchTree,
        attempt: usize,
    ) -> Result<AnchoredScaffold, AgentFailure> {
        let prompt = plan_prompt(window, tree, self.templates)?;
        let role = self.roles.plan.clone();
        let resp = self.call(&role, role.temperature, KIND_PLAN, attempt, prompt)?;
        Ok(anchors::parse_plan_response(&resp.text)?)
    }

    pub fn code_step(
        &mut self,
        window: &ContextWindow,
        tree: &SearchTree,
        scaffold: &AnchoredScaffold,
        attempt: usize,
    ) -> Result<String, AgentFailure> {
        let prompt = code_prompt(window, tree, scaffold, self.templates)?;
        let role = self.roles.code.clone();
        let resp = self.call(&role, role.temperature, KIND_CODE, attempt, prompt)?;
        extract_final_code(&resp.text)
    }

    pub fn debug_step(
        &mut self,
        window: &ContextWindow,
        tree: &SearchTree,
        attempt: usize,
    ) -> Result<String, AgentFailure> {
        let prompt = debug_prompt(window, tree, self.templates)?;
        let role = self.roles.debug.clone();
        let resp = self.call(&role, role.temperature, KIND_DEBUG, attempt, prompt)?;
        extract_final_code(&resp.text)
    }

    /// One-shot generation around `node` at the baseline temperature.
    pub fn baseline_step(
        &mut self,
        tree: &SearchTree,
        node: NodeId,
        kind: &str,
        attempt: usize,
    ) -> Result<String, AgentFailure> {
        let prompt = single_node_prompt(tree, node, self.templates)?;
        let role = self.roles.code.clone();
        let resp = self.call(&role, self.baseline_temperature, kind, attempt, prompt)?;
        extract_final_code(&resp.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SearchRng;
    use crate::tree::fixtures::example_tree;
    use crate::window::{build_code_window, build_debug_window, build_plan_window};
    use provider::ScriptedProvider;

    const PLAN_REPLY: &str = "Fuse the two loops.\n\n```python\nimport torch\nsrc_source = \"\"\"\n// <<<IMPROVE BEGIN>>>\nint x;\n// <<<IMPROVE END>>>\n\"\"\"\nclass ModelNew: pass\n```\n";
    const CODE_REPLY: &str = "Here it is.\n\n```python\nclass ModelNew:\n    ## <<<IMPROVE BEGIN>>>\n    pass\n    ## <<<IMPROVE END>>>\n```\nDone.";

    fn rng() -> SearchRng {
        SearchRng::seed_from_u64(3)
    }

    #[test]
    fn defaults() {
        let r = RoleSet::default();
        assert_eq!(
            (r.plan.temperature, r.code.temperature, r.debug.temperature),
            (0.8, 0.1, 0.1)
        );
        assert_eq!(r.plan.max_output_tokens, 8192);
        r.validate().unwrap();
    }

    #[test]
    fn role_instructions_reach_the_prompt() {
        let t = example_tree();
        let tpl = Templates::builtin();
        let w = build_plan_window(&t, NodeId(0), 2, 5, &mut rng()).unwrap();
        let p = plan_prompt(&w, &t, &tpl).unwrap();
        assert!(p.user_text.contains("Give ONE advice of the top priority!"));
        assert!(p.system_text.starts_with("## System Message"));
        for ph in [
            templates::PH_SYSTEM,
            templates::PH_ARCH,
            templates::PH_FOCUS,
            templates::PH_INSTRUCTION,
        ] {
            assert!(!p.user_text.contains(ph), "unfilled {ph}");
        }

        let w = build_code_window(&t, NodeId(1), 5, &mut rng()).unwrap();
        let s = anchors::parse_plan_response(PLAN_REPLY).unwrap();
        let p = code_prompt(&w, &t, &s, &tpl).unwrap();
        assert!(p
            .user_text
            .contains("Name your optimized output architecture ModelNew"));
        assert!(p
            .user_text
            .contains("Here is your latest attempt:\nFuse the two loops.\n\nimport torch"));

        let w = build_debug_window(&t, NodeId(2), 5, &mut rng()).unwrap();
        let p = debug_prompt(&w, &t, &tpl).unwrap();
        assert!(p.user_text.contains("Return the fixed bug-free code"));
    }

    #[test]
    fn prompts_are_deterministic() {
        let t = example_tree();
        let tpl = Templates::builtin();
        let w = build_plan_window(&t, NodeId(3), 2, 5, &mut rng()).unwrap();
        assert_eq!(
            plan_prompt(&w, &t, &tpl).unwrap(),
            plan_prompt(&w, &t, &tpl).unwrap()
        );
    }

    #[test]
    fn extraction_rules() {
        assert_eq!(
            extract_final_code("x\n```python\nclass ModelNew: pass\n```\n").unwrap(),
            "class ModelNew: pass\n"
        );
        let two = "```\nfirst ModelNew\n```\ntext\n```\nsecond ModelNew\n```";
        assert_eq!(extract_final_code(two).unwrap(), "second ModelNew\n");
        let later_without = "```\nclass ModelNew\n```\n```\nhelper\n```";
        assert_eq!(
            extract_final_code(later_without).unwrap(),
            "class ModelNew\n"
        );
        assert_eq!(
            extract_final_code("prose only").unwrap_err().to_string(),
            "no code block"
        );
        assert_eq!(
            extract_final_code("```\nclass Model\n```")
                .unwrap_err()
                .to_string(),
            "no ModelNew definition found"
        );
        assert!(!extract_final_code(CODE_REPLY).unwrap().contains("IMPROVE"));
    }

    #[test]
    fn steps_use_role_temperatures_and_record_calls() {
        let t = example_tree();
        let tpl = Templates::builtin();
        let roles = RoleSet::default();
        let p = ScriptedProvider::sequence([PLAN_REPLY, CODE_REPLY, CODE_REPLY]);
        let mut runner = AgentRunner::new(&p, &roles, &tpl, "run");
        let w = build_plan_window(&t, NodeId(1), 2, 5, &mut rng()).unwrap();
        let s = runner.plan_step(&w, &t, 6).unwrap();
        assert_eq!(s.regions.len(), 1);
        let w = build_code_window(&t, NodeId(1), 5, &mut rng()).unwrap();
        let code = runner.code_step(&w, &t, &s, 6).unwrap();
        assert!(code.contains("ModelNew"));
        let w = build_debug_window(&t, NodeId(2), 5, &mut rng()).unwrap();
        runner.debug_step(&w, &t, 7).unwrap();
        let temps: Vec<f64> = p.requests().iter().map(|r| r.temperature).collect();
        assert_eq!(temps, vec![0.8, 0.1, 0.1]);
        let calls = runner.take_calls();
        let names: Vec<String> = calls.iter().map(CallRecord::file_name).collect();
        assert_eq!(
            names,
            vec!["006_plan.json", "006_code.json", "007_debug.json"]
        );
        assert_eq!(calls[0].request.request_tag, "run:006:plan");
    }

    #[test]
    fn failures_are_structured() {
        let t = example_tree();
        let tpl = Templates::builtin();
        let roles = RoleSet::default();
        let w = build_plan_window(&t, NodeId(1), 2, 5, &mut rng()).unwrap();
        let p = ScriptedProvider::sequence(["just prose"]);
        let mut runner = AgentRunner::new(&p, &roles, &tpl, "run");
        let err = runner.plan_step(&w, &t, 1).unwrap_err();
        assert!(err.is_parse());
        assert!(err.to_string().contains("no code block"));

        let p = ScriptedProvider::sequence([provider::ScriptEntry::Failure {
            error: "timeout".into(),
        }]);
        let mut runner = AgentRunner::new(&p, &roles, &tpl, "run");
        let err = runner.plan_step(&w, &t, 1).unwrap_err();
        assert!(!err.is_parse());
        assert!(err.to_string().contains("provider exhausted retries"));
        assert!(runner.take_calls()[0].error.is_some());
    }

    #[test]
    fn outside_edit_detection() {
        let s = anchors::parse_plan_response(PLAN_REPLY).unwrap();
        let faithful = "import torch\nsrc_source = \"\"\"\nint y;\n\"\"\"\nclass ModelNew: pass\n";
        assert!(!edits_outside_regions(&s, faithful));
        let changed = "import numpy\nsrc_source = \"\"\"\nint y;\n\"\"\"\nclass ModelNew: pass\n";
        assert!(edits_outside_regions(&s, changed));
    }
}
