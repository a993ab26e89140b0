//! Prompt template set.
//!
//! Seven text files make up a template directory. The built-in set is
//! compiled into the binary from `templates/`; a directory on disk with the
//! same file names can replace it.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const SYSTEM: &str = "system.txt";
pub const EXAMPLE_ARCH: &str = "example_arch.txt";
pub const EXAMPLE_NEW_ARCH: &str = "example_new_arch.txt";
pub const FRAME: &str = "frame.txt";
pub const INSTR_PLAN: &str = "instr_plan.txt";
pub const INSTR_CODE: &str = "instr_code.txt";
pub const INSTR_DEBUG: &str = "instr_debug.txt";

pub const FILE_NAMES: [&str; 7] = [
    SYSTEM,
    EXAMPLE_ARCH,
    EXAMPLE_NEW_ARCH,
    FRAME,
    INSTR_PLAN,
    INSTR_CODE,
    INSTR_DEBUG,
];

pub const PH_SYSTEM: &str = "{System Message}";
pub const PH_EXAMPLE_ARCH: &str = "{Example Architecture Source Code}";
pub const PH_EXAMPLE_NEW_ARCH: &str = "{Example New Architecture Source Code}";
pub const PH_ARCH: &str = "{Architecture Source Code}";
pub const PH_FOCUS: &str = "{Source Code of the Selected Node}";
pub const PH_HISTORY_SOURCE: &str = "{Source Code of Historical Attempt}";
pub const PH_COMPILER_LOG: &str = "{Compiler Log}";
pub const PH_RESULT: &str = "{Runtime or Correctness Error}";
pub const PH_INSTRUCTION: &str = "{Role-specific Instruction}";

const LATEST_HEADING: &str = "Here is your latest attempt:";
const HISTORY_HEADING: &str = "[Dynamic Context Window]";
const FIRST_BLOCK: &str = "**Kernel Source Code #1**";
const SECOND_BLOCK: &str = "**Kernel Source Code #2**";
const SKIPPED: &str = "[...skipped]\n";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing template file {0}")]
    MissingFile(String),
    #[error("template {file} is missing placeholder or marker {placeholder}")]
    MissingPlaceholder { file: String, placeholder: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The frame split at its structural markers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParts {
    /// System message, examples and architecture.
    pub intro: String,
    /// "latest attempt" section with the focus placeholder.
    pub latest: String,
    /// Heading and guidance printed before the numbered history blocks.
    pub history_preamble: String,
    /// One numbered history block; `#1` is the number to substitute.
    pub history_block: String,
    /// Role instruction section.
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub system: String,
    pub example_arch: String,
    pub example_new_arch: String,
    pub frame: String,
    pub instr_plan: String,
    pub instr_code: String,
    pub instr_debug: String,
}

impl Templates {
    pub fn builtin() -> Self {
        Self {
            system: include_str!("../templates/system.txt").to_string(),
            example_arch: include_str!("../templates/example_arch.txt").to_string(),
            example_new_arch: include_str!("../templates/example_new_arch.txt").to_string(),
            frame: include_str!("../templates/frame.txt").to_string(),
            instr_plan: include_str!("../templates/instr_plan.txt").to_string(),
            instr_code: include_str!("../templates/instr_code.txt").to_string(),
            instr_debug: include_str!("../templates/instr_debug.txt").to_string(),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            let path = dir.join(name);
            if !path.exists() {
                return Err(TemplateError::MissingFile(path.display().to_string()));
            }
            fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let t = Self {
            system: read(SYSTEM)?,
            example_arch: read(EXAMPLE_ARCH)?,
            example_new_arch: read(EXAMPLE_NEW_ARCH)?,
            frame: read(FRAME)?,
            instr_plan: read(INSTR_PLAN)?,
            instr_code: read(INSTR_CODE)?,
            instr_debug: read(INSTR_DEBUG)?,
        };
        t.frame_parts()?;
        Ok(t)
    }

    /// Write the set to `dir` using the canonical file names.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in [
            (SYSTEM, &self.system),
            (EXAMPLE_ARCH, &self.example_arch),
            (EXAMPLE_NEW_ARCH, &self.example_new_arch),
            (FRAME, &self.frame),
            (INSTR_PLAN, &self.instr_plan),
            (INSTR_CODE, &self.instr_code),
            (INSTR_DEBUG, &self.instr_debug),
        ] {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn frame_parts(&self) -> Result<FrameParts, TemplateError> {
        let f = &self.frame;
        let find = |needle: &str, from: usize| {
            f[from..].find(needle).map(|i| i + from).ok_or_else(|| {
                TemplateError::MissingPlaceholder {
                    file: FRAME.into(),
                    placeholder: needle.into(),
                }
            })
        };
        for ph in [
            PH_SYSTEM,
            PH_EXAMPLE_ARCH,
            PH_EXAMPLE_NEW_ARCH,
            PH_ARCH,
            PH_FOCUS,
            PH_HISTORY_SOURCE,
            PH_COMPILER_LOG,
            PH_RESULT,
            PH_INSTRUCTION,
        ] {
            find(ph, 0)?;
        }
        let latest = find(LATEST_HEADING, 0)?;
        let history = find(HISTORY_HEADING, latest)?;
        let first = find(FIRST_BLOCK, history)?;
        let second = find(SECOND_BLOCK, first)?;
        let skipped = find(SKIPPED, second)?;
        let mut tail_start = skipped + SKIPPED.len();
        while f[tail_start..].starts_with('\n') {
            tail_start += 1;
        }
        Ok(FrameParts {
            intro: f[..latest].to_string(),
            latest: f[latest..history].to_string(),
            history_preamble: f[history..first].to_string(),
            history_block: f[first..second].to_string(),
            tail: f[tail_start..].to_string(),
        })
    }
}

/// Replace placeholders in one left-to-right pass. Substituted text is never
/// rescanned, so sources that happen to contain a placeholder stay intact.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|(ph, v)| rest.find(ph).map(|at| (at, *ph, *v)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, ph, v)) => {
                out.push_str(&rest[..at]);
                out.push_str(v);
                rest = &rest[at + ph.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// Drop the single terminating newline a template file carries.
pub fn body(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}
