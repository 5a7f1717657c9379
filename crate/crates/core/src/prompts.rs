//! Prompt templates, class names and the text-derived classification and
//! context weights built from them.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_columns, norm, Matrix, EPS_NORM};

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";

/// A prompt template with exactly one `[CLASS]` slot and the context it names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
    context_name: String,
}

impl PromptTemplate {
    pub fn new(context_name: impl Into<String>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let context_name = context_name.into();
        let count = template.matches(CLASS_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Template {
                template,
                reason: format!("expected exactly one {CLASS_PLACEHOLDER}, found {count}"),
            });
        }
        if context_name.trim().is_empty() {
            return Err(Error::Template {
                template,
                reason: "empty context name".into(),
            });
        }
        Ok(Self {
            template,
            context_name,
        })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn context_name(&self) -> &str {
        &self.context_name
    }

    pub fn fill(&self, class_name: &str) -> String {
        self.template.replacen(CLASS_PLACEHOLDER, class_name, 1)
    }
}

/// Ordered, unique class names; index `k` names label `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassNameSet {
    names: Vec<String>,
}

impl ClassNameSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::ClassNames("no class names".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::ClassNames(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::ClassNames(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One name per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }
}

/// Templates with unique context names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            if templates[..i].iter().any(|o| o.context_name == t.context_name) {
                return Err(Error::Template {
                    template: t.template.clone(),
                    reason: format!("duplicate context name {:?}", t.context_name),
                });
            }
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    /// `context_name<TAB>template` per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (ctx, tpl) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                reason: "expected context_name<TAB>template".into(),
            })?;
            out.push(PromptTemplate::new(ctx.trim(), tpl.trim())?);
        }
        Self::new(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.templates
            .iter()
            .map(|t| format!("{}\t{}\n", t.context_name, t.template))
            .collect()
    }
}

/// The cross product of templates and classes, template-major:
/// entry `i * K + j` is template `i` filled with class `j`.
pub fn build_prompt_set(templates: &TemplateSet, classes: &ClassNameSet) -> Vec<String> {
    templates
        .templates()
        .iter()
        .flat_map(|t| classes.names().iter().map(move |c| t.fill(c)))
        .collect()
}

/// Templates and class names used together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub templates: TemplateSet,
    pub classes: ClassNameSet,
}

impl PromptSet {
    pub fn new(templates: TemplateSet, classes: ClassNameSet) -> Self {
        Self { templates, classes }
    }

    pub fn load(templates: &Path, classes: &Path) -> Result<Self> {
        Ok(Self::new(TemplateSet::load(templates)?, ClassNameSet::load(classes)?))
    }

    pub fn prompts(&self) -> Vec<String> {
        build_prompt_set(&self.templates, &self.classes)
    }
}

/// Encoded prompt features `W` with shape `D x |P| x |C|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWeightTensor {
    /// `D x (|P| * |C|)`, column `i * K + j` holds prompt (template i, class j).
    columns: Matrix,
    num_templates: usize,
    num_classes: usize,
}

impl PromptWeightTensor {
    /// `columns` must be ordered like [`build_prompt_set`] and unit-norm.
    pub fn new(columns: Matrix, num_templates: usize, num_classes: usize) -> Result<Self> {
        if columns.cols() != num_templates * num_classes {
            return Err(Error::Dimension(format!(
                "{} prompt columns for {num_templates} templates x {num_classes} classes",
                columns.cols()
            )));
        }
        for c in 0..columns.cols() {
            let n = norm(&columns.column(c));
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("prompt column {c} has norm {n}")));
            }
        }
        Ok(Self {
            columns,
            num_templates,
            num_classes,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.columns.rows()
    }

    pub fn num_templates(&self) -> usize {
        self.num_templates
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prompt(&self, template: usize, class: usize) -> Vec<f64> {
        self.columns.column(template * self.num_classes + class)
    }

    fn mean_then_normalize(&self, outer: usize, inner: usize, at: impl Fn(usize, usize) -> usize) -> Result<Matrix> {
        let d = self.embed_dim();
        let mut out = Matrix::zeros(d, outer);
        for o in 0..outer {
            let mut acc = vec![0.0; d];
            for i in 0..inner {
                let col = at(o, i);
                for (r, a) in acc.iter_mut().enumerate() {
                    *a += self.columns.get(r, col);
                }
            }
            for a in acc.iter_mut() {
                *a /= inner as f64;
            }
            let n = norm(&acc);
            if !(n > EPS_NORM) {
                return Err(Error::DegenerateColumn { index: o, norm: n });
            }
            out.set_column(o, &acc);
        }
        l2_normalize_columns(&out)
    }

    /// Per-class weights: template-averaged prompt features, unit columns (`D x K`).
    pub fn class_weights(&self) -> Result<Matrix> {
        let k = self.num_classes;
        self.mean_then_normalize(k, self.num_templates, |class, t| t * k + class)
    }

    /// Per-template context weights (`D x |P|`).
    pub fn context_weights(&self, variant: ContextVariant) -> Result<Matrix> {
        let k = self.num_classes;
        match variant {
            ContextVariant::Averaged => self.mean_then_normalize(self.num_templates, k, |t, class| t * k + class),
            ContextVariant::PerClass(label) => {
                if label >= k {
                    return Err(Error::Index { index: label, len: k });
                }
                self.mean_then_normalize(self.num_templates, 1, |t, _| t * k + label)
            }
        }
    }
}

/// Which class slice the context weights are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextVariant {
    /// Average over all class names.
    #[default]
    Averaged,
    /// Only the prompts of one (ground-truth) class.
    PerClass(usize),
}
