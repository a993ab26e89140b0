//! Stochastic stand-in for a language model, paired with the simulated
//! evaluation landscape.
//!
//! The provider reads the directive set of the latest attempt from the
//! prompt and answers in the shape each role expects. Every reply is drawn
//! from a stream seeded by the run seed and the request tag, so replies do
//! not depend on call history and a resumed run sees the same answers.

use serde::{Deserialize, Serialize};

use super::provider::{parse_tag, CompletionRequest, CompletionResponse, Provider, ProviderError};
use super::{KIND_CODE, KIND_DEBUG, KIND_PLAN, KIND_REFLECT, KIND_SAMPLE};
use crate::eval::directives;
use crate::rng::SearchRng;

const LATEST_HEADING: &str = "Here is your latest attempt:\n";
const SECTION_ENDS: [&str; 3] = [
    "\n\n**Compiler Observation**",
    "\n\n[Dynamic Context Window]",
    "\n\n## Instruction",
];
const PLAN_PREFIX: &str = "// PLAN:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedProviderSpec {
    pub seed: u64,
    /// Directive names the provider may propose.
    pub directives: Vec<String>,
    /// Chance that a proposal is a useful directive rather than a bug.
    pub p_directive: f64,
    pub bug_token: String,
}

impl Default for SimulatedProviderSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            directives: ["fuse", "tile", "unroll", "vectorize"]
                .map(String::from)
                .to_vec(),
            p_directive: 0.7,
            bug_token: "BUG".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedProvider {
    pub spec: SimulatedProviderSpec,
}

/// FNV-1a, used to fold the request tag into the seed.
fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Text of the latest-attempt slot of a prompt.
pub fn latest_section(user_text: &str) -> &str {
    let Some(at) = user_text.find(LATEST_HEADING) else {
        return "";
    };
    let rest = &user_text[at + LATEST_HEADING.len()..];
    let end = SECTION_ENDS
        .iter()
        .filter_map(|m| rest.find(m))
        .min()
        .unwrap_or(rest.len());
    &rest[..end]
}

/// A reference architecture with no directives.
pub fn reference_source() -> String {
    "import torch\nimport torch.nn as nn\n\n\nclass Model(nn.Module):\n    def __init__(self):\n        super().__init__()\n\n    def forward(self, x):\n        return torch.relu(x)\n\n\ndef get_inputs():\n    return [torch.randn(4096)]\n\n\ndef get_init_inputs():\n    return []\n".to_string()
}

/// A candidate kernel carrying `lines` inside its CUDA source string.
pub fn kernel_source(lines: &[String]) -> String {
    let mut body = String::new();
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    format!(
        "import torch\nimport torch.nn as nn\nfrom torch.utils.cpp_extension import load_inline\n\nkernel_source = \"\"\"\n#include <torch/extension.h>\n{body}torch::Tensor relu_cuda(torch::Tensor x) {{ return torch::relu(x); }}\n\"\"\"\n\nrelu = load_inline(name=\"relu\", cpp_sources=\"torch::Tensor relu_cuda(torch::Tensor x);\", cuda_sources=kernel_source, functions=[\"relu_cuda\"])\n\n\nclass ModelNew(nn.Module):\n    def __init__(self):\n        super().__init__()\n\n    def forward(self, x):\n        return relu.relu_cuda(x)\n"
    )
}

fn opt_line(name: &str) -> String {
    format!("// OPT:{name}")
}

impl SimulatedProvider {
    pub fn new(spec: SimulatedProviderSpec) -> Self {
        Self { spec }
    }

    fn has_bug(&self, text: &str) -> bool {
        text.contains(&self.spec.bug_token)
    }

    /// A directive not yet in `present` with probability `p_directive`,
    /// otherwise the bug token.
    fn propose(&self, present: &[String], rng: &mut SearchRng) -> String {
        let missing: Vec<&String> = self
            .spec
            .directives
            .iter()
            .filter(|d| !present.contains(d))
            .collect();
        if rng.uniform() < self.spec.p_directive && !missing.is_empty() {
            missing[rng.index(missing.len())].clone()
        } else {
            self.spec.bug_token.clone()
        }
    }

    fn fenced(prose: &str, code: &str) -> String {
        format!("{prose}\n\n```python\n{code}```\n")
    }

    fn plan_reply(&self, focus: &str, rng: &mut SearchRng) -> String {
        let present = directives(focus);
        let proposal = self.propose(&present, rng);
        let mut lines: Vec<String> = present.iter().map(|d| opt_line(d)).collect();
        lines.push("// <<<IMPROVE BEGIN>>>".into());
        lines.push(format!("{PLAN_PREFIX}{proposal}"));
        lines.push("// <<<IMPROVE END>>>".into());
        Self::fenced(
            &format!("Advice: apply {proposal} to the relu kernel."),
            &kernel_source(&lines),
        )
    }

    fn code_reply(&self, focus: &str) -> String {
        let mut lines = Vec::new();
        for l in focus.lines() {
            let t = l.trim();
            if let Some(name) = t.strip_prefix("// OPT:") {
                lines.push(opt_line(name.trim()));
            } else if let Some(name) = t.strip_prefix(PLAN_PREFIX) {
                let name = name.trim();
                if name == self.spec.bug_token {
                    lines.push(format!("// {name}"));
                } else {
                    lines.push(opt_line(name));
                }
            }
        }
        Self::fenced("Implemented the advice.", &kernel_source(&lines))
    }

    fn debug_reply(&self, focus: &str) -> String {
        let mut seen: Vec<String> = Vec::new();
        for d in directives(focus) {
            if !seen.contains(&d) {
                seen.push(d);
            }
        }
        let lines: Vec<String> = seen.iter().map(|d| opt_line(d)).collect();
        Self::fenced("Removed the faulty lines.", &kernel_source(&lines))
    }

    fn sample_reply(&self, rng: &mut SearchRng) -> String {
        let proposal = self.propose(&[], rng);
        Self::fenced("One-shot attempt.", &kernel_source(&[opt_line(&proposal)]))
    }

    fn reflect_reply(&self, focus: &str, rng: &mut SearchRng) -> String {
        if self.has_bug(focus) {
            return self.debug_reply(focus);
        }
        let mut present = directives(focus);
        let proposal = self.propose(&present, rng);
        present.push(proposal);
        let lines: Vec<String> = present.iter().map(|d| opt_line(d)).collect();
        Self::fenced("Refined the last attempt.", &kernel_source(&lines))
    }
}

impl Provider for SimulatedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let (_, _, kind) = parse_tag(&request.request_tag).ok_or_else(|| {
            ProviderError::Rejected(format!("unrecognized request tag {}", request.request_tag))
        })?;
        let mut rng = SearchRng::seed_from_u64(self.spec.seed ^ fnv1a(&request.request_tag));
        let focus = latest_section(&request.user_text);
        let text = match kind {
            KIND_PLAN => self.plan_reply(focus, &mut rng),
            KIND_CODE => self.code_reply(focus),
            KIND_DEBUG => self.debug_reply(focus),
            KIND_SAMPLE => self.sample_reply(&mut rng),
            KIND_REFLECT => self.reflect_reply(focus, &mut rng),
            other => {
                return Err(ProviderError::Rejected(format!(
                    "unknown call kind {other}"
                )))
            }
        };
        Ok(CompletionResponse {
            text,
            provider_latency_ms: 0.0,
            truncated: false,
        })
    }
}
