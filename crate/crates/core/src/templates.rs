//! Versioned prompt text.
//!
//! The strings are kept byte-for-byte as the model was trained on them,
//! trailing whitespace included. Override individual fields through
//! configuration rather than editing them here.

use serde::{Deserialize, Serialize};

pub const TEMPLATE_VERSION: &str = "v1";

pub const SYSTEM: &str = "You are a helpful assistant.";

pub const FINE_TASK: &str = "This is a sequence interleaved with timestamps and frames. \n\
Your task is to identify the temporal window (start and end timestamps) when the given query appears.";

pub const COARSE_TASK: &str = "This is a sequence interleaved with timestamps and frames. \n\
Your task is to identify the specific timestamp(s) when the given query appears.";

pub const DECOMPOSE_SYSTEM: &str = "You are Qwen, created by Alibaba Cloud. You are a helpful assistant.";

pub const DECOMPOSE_INSTRUCTIONS: &str = r#"Analyze the given query and:
1. Identify ONLY concrete, specific objects (nouns) that are:
   - Tangible physical items
   - Clearly named (not pronouns/ambiguous)
2. STRICTLY EXCLUDE:
   - All human references (person, he, she, they, etc.)
   - Ambiguous terms (something, anything, things, etc.)
   - Pronouns (it, they, them)
   - Abstract concepts
3. For each valid object, generate EXACTLY ONE question:
   "When does [OBJECT] appear?"

Negative Examples (BAD):
Input: "Someone left some items on the furniture"
Wrong Output:
-When does the furniture appear?
-When does some items appear?  # <-- AMBIGUOUS TERM SHOULD BE EXCLUDED

Positive Examples (GOOD):
Input: "The machine processed the raw materials during the night"
Output:
-When does the machine appear?
-When does the raw materials appear?
-When does the night appear?"#;

pub const DECOMPOSE_USER_PREFIX: &str = "Analyze: ";

pub const QA_SYSTEM: &str = "You are a helpful assistant.";

pub const QA_INSTRUCTION: &str = "Please only give the best option.";

pub const QA_ANSWER_CUE: &str = "Best Option:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub version: String,
    pub system: String,
    pub fine_task: String,
    pub coarse_task: String,
    pub decompose_system: String,
    pub decompose_instructions: String,
    pub qa_system: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            system: SYSTEM.to_string(),
            fine_task: FINE_TASK.to_string(),
            coarse_task: COARSE_TASK.to_string(),
            decompose_system: DECOMPOSE_SYSTEM.to_string(),
            decompose_instructions: DECOMPOSE_INSTRUCTIONS.to_string(),
            qa_system: QA_SYSTEM.to_string(),
        }
    }
}
