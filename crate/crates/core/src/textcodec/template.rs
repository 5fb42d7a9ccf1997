//! Discrete input templates for the five tasks.
//!
//! Entities are rendered as `user_{n}` / `item_{n}` with dense 1-based
//! numbers, and every mention is returned as a byte span so the encoder can
//! assign whole-word indices.

use std::fmt::Write;
use std::ops::Range;

use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskInput {
    Sequential { user: u32, history: Vec<u32> },
    TopN { user: u32, candidates: Vec<u32> },
    Explanation { user: u32, item: u32 },
    Preference { user: u32 },
    Attribute { item: u32 },
}

impl TaskInput {
    pub fn task(&self) -> Task {
        match self {
            TaskInput::Sequential { .. } => Task::Sequential,
            TaskInput::TopN { .. } => Task::TopN,
            TaskInput::Explanation { .. } => Task::Explanation,
            TaskInput::Preference { .. } => Task::Preference,
            TaskInput::Attribute { .. } => Task::Attribute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    /// Byte ranges of every entity mention, in order.
    pub spans: Vec<Range<usize>>,
}

pub fn user_surface(n: u32) -> String {
    format!("user_{n}")
}

pub fn item_surface(n: u32) -> String {
    format!("item_{n}")
}

struct Builder {
    text: String,
    spans: Vec<Range<usize>>,
}

impl Builder {
    fn new() -> Self {
        Self {
            text: String::new(),
            spans: Vec::new(),
        }
    }

    fn lit(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn entity(&mut self, kind: &str, n: u32) -> &mut Self {
        let start = self.text.len();
        let _ = write!(self.text, "{kind}_{n}");
        self.spans.push(start..self.text.len());
        self
    }

    fn items(&mut self, items: &[u32]) -> &mut Self {
        for (i, &it) in items.iter().enumerate() {
            if i > 0 {
                self.lit(" ");
            }
            self.entity("item", it);
        }
        self
    }

    fn finish(&mut self) -> Rendered {
        Rendered {
            text: std::mem::take(&mut self.text),
            spans: std::mem::take(&mut self.spans),
        }
    }
}

pub fn render_task_input(input: &TaskInput) -> Rendered {
    let mut b = Builder::new();
    match input {
        TaskInput::Sequential { user, history } => {
            b.lit("Predict the next item for ")
                .entity("user", *user)
                .lit(" after ")
                .items(history);
        }
        TaskInput::TopN { user, candidates } => {
            b.lit("Pick the best item for ")
                .entity("user", *user)
                .lit(" from ")
                .items(candidates);
        }
        TaskInput::Explanation { user, item } => {
            b.lit("Generate an explanation for ")
                .entity("user", *user)
                .lit(" about ")
                .entity("item", *item);
        }
        TaskInput::Preference { user } => {
            b.lit("Generate ").entity("user", *user).lit("'s preference");
        }
        TaskInput::Attribute { item } => {
            b.lit("Generate ").entity("item", *item).lit("'s attribute");
        }
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationale_templates() {
        let r = render_task_input(&TaskInput::Preference { user: 42 });
        assert_eq!(r.text, "Generate user_42's preference");
        assert_eq!(r.spans, vec![9..16]);
        assert_eq!(&r.text[r.spans[0].clone()], "user_42");

        let r = render_task_input(&TaskInput::Attribute { item: 7 });
        assert_eq!(r.text, "Generate item_7's attribute");
        assert_eq!(r.spans.len(), 1);
    }

    #[test]
    fn sequential_marks_user_and_history() {
        let r = render_task_input(&TaskInput::Sequential {
            user: 1,
            history: vec![4, 9, 12],
        });
        assert_eq!(r.spans.len(), 4);
        let mentions: Vec<&str> = r.spans.iter().map(|s| &r.text[s.clone()]).collect();
        assert_eq!(mentions, ["user_1", "item_4", "item_9", "item_12"]);
    }
}
