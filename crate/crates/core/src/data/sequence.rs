use super::DataError;

/// One interaction: its domain (0-based) and the aligned category tuple,
/// coarsest level first and the item id last.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub domain: usize,
    pub categories: Vec<u32>,
    pub timestamp: i64,
}

impl Interaction {
    pub fn item_id(&self) -> u32 {
        *self.categories.last().expect("non-empty category tuple")
    }
}

/// A user's interactions from every domain merged in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainHybridSequence {
    pub user_id: String,
    pub items: Vec<Interaction>,
}

impl DomainHybridSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Fixed-length, left-padded window. `None` slots are PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub tokens: Vec<Option<Interaction>>,
    pub target_mask: Vec<bool>,
}

impl PaddedSequence {
    /// Build from slots, deriving the target mask: position `t` has a target
    /// iff slots `t` and `t + 1` are both real interactions.
    pub fn from_tokens(tokens: Vec<Option<Interaction>>) -> Self {
        let m = tokens.len();
        let target_mask = (0..m)
            .map(|t| t + 1 < m && tokens[t].is_some() && tokens[t + 1].is_some())
            .collect();
        Self {
            tokens,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn non_pad(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_some()).count()
    }

    pub fn target_count(&self) -> usize {
        self.target_mask.iter().filter(|&&b| b).count()
    }
}

/// Keep the most recent `m` interactions and left-pad the rest.
pub fn pad_truncate(items: &[Interaction], m: usize) -> PaddedSequence {
    assert!(m >= 2, "window length must be at least 2");
    let keep = &items[items.len().saturating_sub(m)..];
    let mut tokens = vec![None; m - keep.len()];
    tokens.extend(keep.iter().cloned().map(Some));
    PaddedSequence::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOutSplit {
    pub user_id: String,
    pub train: Vec<Interaction>,
    pub valid_target: Interaction,
    pub test_target: Interaction,
}

impl LeaveOneOutSplit {
    pub fn test_domain(&self) -> usize {
        self.test_target.domain
    }

    /// Context for predicting the validation target.
    pub fn valid_context(&self) -> &[Interaction] {
        &self.train
    }

    /// Context for predicting the test target: training prefix plus the
    /// validation interaction.
    pub fn test_context(&self) -> Vec<Interaction> {
        let mut ctx = self.train.clone();
        ctx.push(self.valid_target.clone());
        ctx
    }

    /// Every item id the user touched.
    pub fn history_items(&self) -> impl Iterator<Item = u32> + '_ {
        self.train
            .iter()
            .chain([&self.valid_target, &self.test_target])
            .map(Interaction::item_id)
    }
}

/// Hold out the last interaction for test and the one before for validation.
pub fn split_leave_one_out(seq: &DomainHybridSequence) -> Result<LeaveOneOutSplit, DataError> {
    let n = seq.items.len();
    if n < 3 {
        return Err(DataError::TooShort(n));
    }
    Ok(LeaveOneOutSplit {
        user_id: seq.user_id.clone(),
        train: seq.items[..n - 2].to_vec(),
        valid_target: seq.items[n - 2].clone(),
        test_target: seq.items[n - 1].clone(),
    })
}

/// Split every sequence, returning the splits and the number excluded for
/// being shorter than three interactions.
pub fn split_all(seqs: &[DomainHybridSequence]) -> (Vec<LeaveOneOutSplit>, usize) {
    let mut excluded = 0;
    let splits = seqs
        .iter()
        .filter_map(|s| match split_leave_one_out(s) {
            Ok(sp) => Some(sp),
            Err(_) => {
                excluded += 1;
                None
            }
        })
        .collect();
    (splits, excluded)
}
