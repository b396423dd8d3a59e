//! Prompt templates with `{input}` and `{output}` slots.

use crate::error::{Error, Result};
use crate::pool_io::CandidateItem;

const INPUT: &str = "{input}";
const OUTPUT: &str = "{output}";

const BUILTIN: &[(&str, &str)] = &[
    ("plain", "{input}\n{output}"),
    (
        "sst5",
        "How do you feel about the following sentence?\n{input}\nanswer:{output}",
    ),
    ("trec", "content: {input}\n{output}"),
    ("subj", "Input: {input}.\nType: {output}"),
    ("xsum", "write a short summary:\n{input}.\nTL;DR: {output}"),
    ("nq", "Write an answer: {input}\n{output}"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pattern: String,
}

impl Default for Template {
    fn default() -> Self {
        Template::builtin("plain").unwrap()
    }
}

impl Template {
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN.iter().find(|(n, _)| *n == name).map(|(n, p)| Template {
            name: n.to_string(),
            pattern: p.to_string(),
        })
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// A builtin name, or a literal pattern containing `{input}`.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(t) = Template::builtin(spec) {
            return Ok(t);
        }
        if spec.contains(INPUT) {
            let pattern = spec.replace("\\n", "\n");
            return Ok(Template {
                name: "custom".into(),
                pattern,
            });
        }
        Err(Error::UnknownTemplate(spec.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The input part only: everything before the `{output}` slot. This is
    /// what gets scored and what a query looks like in a prompt.
    pub fn render_input(&self, item: &CandidateItem) -> String {
        let head = match self.pattern.find(OUTPUT) {
            Some(at) => &self.pattern[..at],
            None => &self.pattern,
        };
        head.replace(INPUT, &item.text)
    }

    /// A full demonstration with the label in the `{output}` slot.
    pub fn render_demo(&self, item: &CandidateItem) -> String {
        self.pattern
            .replace(INPUT, &item.text)
            .replace(OUTPUT, item.label.as_deref().unwrap_or(""))
    }
}
