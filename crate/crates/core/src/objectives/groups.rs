use serde::Serialize;

use super::spec::{BatchMode, Tag};
use crate::error::{Error, Result};

/// Partition of a step's sub-batches into batch-norm groups. Each group is
/// concatenated and normalized with its own statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizationGroupPlan {
    pub mode: BatchMode,
    pub groups: Vec<Vec<Tag>>,
}

impl NormalizationGroupPlan {
    /// Index of the group holding `tag`.
    pub fn group_of(&self, tag: Tag) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&tag))
    }
}

/// Groups `tags` according to `mode`.
///
/// The four study modes describe `{x_s, x_t, x~_t}` and require those three
/// tags. An adversarial source sub-batch, when present, follows the clean/adv
/// split under [`BatchMode::CleanAdvSplit`] and the source side under
/// [`BatchMode::SourceTargetSplit`].
pub fn compose_norm_groups(mode: BatchMode, tags: &[Tag]) -> Result<NormalizationGroupPlan> {
    if tags.is_empty() {
        return Err(Error::InvalidArgument("no sub-batches to normalize".into()));
    }
    for (i, t) in tags.iter().enumerate() {
        if tags[..i].contains(t) {
            return Err(Error::InvalidArgument(format!("sub-batch {t} listed twice")));
        }
    }
    if mode != BatchMode::Joint {
        let missing: Vec<&str> = [Tag::Xs, Tag::Xt, Tag::XtAdv]
            .iter()
            .filter(|t| !tags.contains(t))
            .map(Tag::name)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "batch mode {} needs sub-batches x_s, x_t, x_t_adv; missing {}",
                mode.name(),
                missing.join(", ")
            )));
        }
    }
    let canon: Vec<Tag> = Tag::ALL.into_iter().filter(|t| tags.contains(t)).collect();
    let pick = |f: &dyn Fn(&Tag) -> bool| canon.iter().copied().filter(|t| f(t)).collect::<Vec<_>>();
    let groups = match mode {
        BatchMode::Joint | BatchMode::Shared => vec![canon.clone()],
        BatchMode::CleanAdvSplit => vec![pick(&|t| !t.is_adversarial()), pick(&|t| t.is_adversarial())],
        BatchMode::SourceTargetSplit => vec![pick(&|t| t.is_source()), pick(&|t| !t.is_source())],
        BatchMode::AllSplit => canon.iter().map(|&t| vec![t]).collect(),
    };
    Ok(NormalizationGroupPlan {
        mode,
        groups: groups.into_iter().filter(|g| !g.is_empty()).collect(),
    })
}
