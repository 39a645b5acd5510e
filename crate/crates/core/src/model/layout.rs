use crate::substrate::AttentionMask;

use super::config::TextRule;
use super::ModelError;

/// Attention stream of a token. Reference tokens travel on the den stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Text,
    Cond,
    Den,
}

impl Branch {
    /// Projection group index used by grouped linear layers.
    pub fn group(self) -> usize {
        match self {
            Branch::Text => 0,
            Branch::Cond => 1,
            Branch::Den => 2,
        }
    }
}

/// What a token carries, which decides its input embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Prompt token `k`.
    Text(usize),
    /// Clean source patch.
    Cond,
    /// Noised target patch.
    Den,
    /// Clean exemplar patch of the target body.
    Ref,
}

impl Role {
    pub fn branch(self) -> Branch {
        match self {
            Role::Text(_) => Branch::Text,
            Role::Cond => Branch::Cond,
            Role::Den | Role::Ref => Branch::Den,
        }
    }
}

/// Per-token role, frame, patch position and chunk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenLayout {
    pub roles: Vec<Role>,
    pub frame: Vec<usize>,
    pub spatial: Vec<usize>,
    pub chunk: Vec<usize>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn push(&mut self, role: Role, frame: usize, spatial: usize, chunk: usize) {
        self.roles.push(role);
        self.frame.push(frame);
        self.spatial.push(spatial);
        self.chunk.push(chunk);
    }

    /// Appends `frames` frames of patch tokens starting at frame `first`.
    pub fn push_frames(&mut self, role: Role, first: usize, frames: usize, per_frame: usize, chunk: usize) {
        for f in first..first + frames {
            for s in 0..per_frame {
                self.push(role, f, s, chunk);
            }
        }
    }

    /// Bidirectional teacher layout `[text | cond | den]`.
    pub fn teacher(text: usize, cond_frames: usize, den_frames: usize, per_frame: usize) -> Self {
        let mut l = Self::default();
        for k in 0..text {
            l.push(Role::Text(k), 0, 0, 0);
        }
        l.push_frames(Role::Cond, 0, cond_frames, per_frame, 0);
        l.push_frames(Role::Den, 0, den_frames, per_frame, 0);
        l
    }

    pub fn branch(&self, i: usize) -> Branch {
        self.roles[i].branch()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.roles.iter().map(|r| r.branch().group()).collect()
    }

    pub fn indices(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.roles[i])).collect()
    }

    pub fn count(&self, branch: Branch) -> usize {
        self.roles.iter().filter(|r| r.branch() == branch).count()
    }

    /// Layout of rows `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            roles: self.roles[range.clone()].to_vec(),
            frame: self.frame[range.clone()].to_vec(),
            spatial: self.spatial[range.clone()].to_vec(),
            chunk: self.chunk[range].to_vec(),
        }
    }
}

/// Whether a `query`-stream token may read a `key`-stream token.
///
/// den reads cond; cond never reads den. Within a stream everything is visible.
pub fn branch_visible(query: Branch, key: Branch, rule: TextRule) -> bool {
    use Branch::*;
    match (query, key) {
        (Cond, Den) => false,
        (Text, Den) => rule == TextRule::ReadsDen,
        _ => true,
    }
}

/// Asymmetric branch mask over a teacher layout. Reference tokens read only
/// each other, so the exemplar encoding does not depend on the clip.
pub fn build_branch_mask(layout: &TokenLayout, rule: TextRule) -> Result<AttentionMask, ModelError> {
    if layout.is_empty() {
        return Err(ModelError::EmptyLayout);
    }
    let n = layout.len();
    let mask = AttentionMask::from_fn(n, n, |i, j| match layout.roles[i] {
        Role::Ref => layout.roles[j] == Role::Ref,
        _ => branch_visible(layout.branch(i), layout.branch(j), rule),
    });
    mask.validate()?;
    Ok(mask)
}
