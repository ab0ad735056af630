use crate::numeric::Tensor;
use crate::tokens::{SegmentKind, SegmentMap, StreamKind};

/// Why an attention entry is blocked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockReason {
    /// Caption query looking at a later caption position.
    Causal,
    /// Region and knowledge token about different object categories.
    KnowledgeRelevance,
    /// Caption query looking at a knowledge token.
    KnowledgeIsolation,
    /// Non-caption query looking at any caption position.
    ContextCaption,
}

/// Additive `{0, -inf}` attention mask with the reason for each blocked entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    reasons: Vec<Option<BlockReason>>,
}

impl MaskMatrix {
    fn build(rows: usize, cols: usize, rule: impl Fn(usize, usize) -> Option<BlockReason>) -> Self {
        let mut reasons = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                reasons.push(rule(q, k));
            }
        }
        MaskMatrix {
            rows,
            cols,
            reasons,
        }
    }

    /// Mask with no blocked entries.
    pub fn open(rows: usize, cols: usize) -> Self {
        Self::build(rows, cols, |_, _| None)
    }

    pub fn from_fn(rows: usize, cols: usize, rule: impl Fn(usize, usize) -> Option<BlockReason>) -> Self {
        Self::build(rows, cols, rule)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn reason(&self, q: usize, k: usize) -> Option<BlockReason> {
        self.reasons[q * self.cols + k]
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.reason(q, k).is_some()
    }

    pub fn value(&self, q: usize, k: usize) -> f64 {
        if self.is_blocked(q, k) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    /// Query rows with at least one admissible key.
    pub fn live_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&q| (0..self.cols).any(|k| !self.is_blocked(q, k)))
            .collect()
    }

    /// Key columns blocked for every query.
    pub fn dead_cols(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&k| (0..self.rows).all(|q| self.is_blocked(q, k)))
            .collect()
    }

    /// Additive mask restricted to the given query rows.
    pub fn tensor_for_rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &q in rows {
            data.extend((0..self.cols).map(|k| self.value(q, k)));
        }
        Tensor::matrix(rows.len(), self.cols, data).expect("mask shape")
    }

    pub fn tensor(&self) -> Tensor {
        self.tensor_for_rows(&(0..self.rows).collect::<Vec<_>>())
    }

    /// Copy without the listed key columns.
    pub fn without_cols(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.cols).filter(|k| !drop.contains(k)).collect();
        Self::build(self.rows, keep.len(), |q, k| self.reason(q, keep[k]))
    }
}

fn caption_rule(q: Option<(SegmentKind, usize)>, k: Option<(SegmentKind, usize)>) -> Option<BlockReason> {
    match (q, k) {
        (Some((SegmentKind::Caption, t)), Some((SegmentKind::Caption, j))) => (j > t).then_some(BlockReason::Causal),
        (_, Some((SegmentKind::Caption, _))) => Some(BlockReason::ContextCaption),
        (Some((SegmentKind::Caption, _)), Some((SegmentKind::Knowledge, _))) => Some(BlockReason::KnowledgeIsolation),
        _ => None,
    }
}

/// Self-attention mask of the internal stream.
pub fn build_internal_mask(segmap: &SegmentMap) -> MaskMatrix {
    let n = segmap.total_len();
    MaskMatrix::build(n, n, |q, k| caption_rule(segmap.locate(q), segmap.locate(k)))
}

/// Self-attention mask of the external stream: the caption rules plus
/// knowledge isolation and region/knowledge category relevance.
pub fn build_external_mask(segmap: &SegmentMap) -> MaskMatrix {
    let n = segmap.total_len();
    MaskMatrix::build(n, n, |q, k| {
        let (lq, lk) = (segmap.locate(q), segmap.locate(k));
        if let Some(r) = caption_rule(lq, lk) {
            return Some(r);
        }
        let pair = (lq.map(|l| l.0), lk.map(|l| l.0));
        let cross_kind = matches!(
            pair,
            (Some(SegmentKind::Region), Some(SegmentKind::Knowledge))
                | (Some(SegmentKind::Knowledge), Some(SegmentKind::Region))
        );
        (cross_kind && segmap.category(q) != segmap.category(k)).then_some(BlockReason::KnowledgeRelevance)
    })
}

/// Mask for queries of one stream attending keys of the other.
pub fn build_cross_mask(query: &SegmentMap, key: &SegmentMap) -> MaskMatrix {
    MaskMatrix::build(query.total_len(), key.total_len(), |q, k| {
        caption_rule(query.locate(q), key.locate(k))
    })
}

/// Self-attention mask for a stream of either kind.
pub fn build_self_mask(segmap: &SegmentMap) -> MaskMatrix {
    match segmap.stream {
        StreamKind::External => build_external_mask(segmap),
        StreamKind::Internal => build_internal_mask(segmap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn ext(regions: &[&str], knowledge: &[&str], transcript: usize, caption: usize) -> SegmentMap {
        SegmentMap::new(
            StreamKind::External,
            &[regions.len(), knowledge.len(), transcript, caption],
            s(regions),
            s(knowledge),
        )
        .unwrap()
    }

    fn int(transcript: usize, caption: usize, video: usize) -> SegmentMap {
        SegmentMap::new(StreamKind::Internal, &[transcript, caption, video], vec![], vec![]).unwrap()
    }

    #[test]
    fn caption_causality() {
        let m = int(2, 6, 1);
        let cap = |i: usize| 2 + i;
        assert!(m.total_len() == 9);
        let mask = build_internal_mask(&m);
        assert_eq!(mask.reason(cap(2), cap(5)), Some(BlockReason::Causal));
        assert_eq!(mask.reason(cap(5), cap(2)), None);
        assert_eq!(mask.reason(cap(3), cap(3)), None);
        // transcript and video rows see no caption column
        for k in 0..6 {
            assert_eq!(mask.reason(0, cap(k)), Some(BlockReason::ContextCaption));
            assert_eq!(mask.reason(8, cap(k)), Some(BlockReason::ContextCaption));
        }
        assert!(!mask.is_blocked(cap(0), 0));
        assert!(!mask.is_blocked(0, 8));
    }

    #[test]
    fn single_caption_row_is_unblocked_within_caption() {
        let mask = build_internal_mask(&int(0, 1, 0));
        assert!(!mask.is_blocked(0, 0));
    }

    #[test]
    fn external_relevance_and_isolation() {
        let m = ext(&["knife", "bowl"], &["knife"], 1, 2);
        let mask = build_external_mask(&m);
        let (knife_r, bowl_r, k, cap0) = (0, 1, 2, 4);
        assert!(!mask.is_blocked(knife_r, k));
        assert!(!mask.is_blocked(k, knife_r));
        assert_eq!(mask.reason(bowl_r, k), Some(BlockReason::KnowledgeRelevance));
        assert_eq!(mask.reason(k, bowl_r), Some(BlockReason::KnowledgeRelevance));
        for c in [cap0, cap0 + 1] {
            assert_eq!(mask.reason(c, k), Some(BlockReason::KnowledgeIsolation));
        }
        assert_eq!(mask.reason(k, cap0), Some(BlockReason::ContextCaption));
        // knowledge still reaches captions through regions and transcript rows
        assert!(!mask.is_blocked(cap0, knife_r));
        assert!(!mask.is_blocked(3, k));
    }

    #[test]
    fn cross_mask_rules() {
        let e = ext(&["knife"], &["knife"], 2, 5);
        let i = int(2, 5, 3);
        let int_q = build_cross_mask(&i, &e);
        let (icap, ecap) = (2, 4);
        assert!(!int_q.is_blocked(icap + 3, ecap + 3));
        assert_eq!(int_q.reason(icap + 3, ecap + 4), Some(BlockReason::Causal));
        assert_eq!(int_q.reason(icap, 1), Some(BlockReason::KnowledgeIsolation));
        let video = 7;
        assert!(!int_q.is_blocked(video, 0));
        assert_eq!(int_q.reason(video, ecap), Some(BlockReason::ContextCaption));

        let ext_q = build_cross_mask(&e, &i);
        assert_eq!(ext_q.reason(1, icap), Some(BlockReason::ContextCaption));
        assert!(!ext_q.is_blocked(ecap + 2, icap + 1));
    }

    #[test]
    fn tensor_and_live_rows() {
        let e = ext(&[], &[], 0, 2);
        let i = int(0, 2, 1);
        let m = build_cross_mask(&e, &i);
        assert_eq!(m.live_rows(), [0, 1]);
        let m = build_cross_mask(&i, &e);
        // the video query finds only caption keys, all blocked
        assert_eq!(m.live_rows(), [0, 1]);
        let t = build_internal_mask(&i).tensor();
        assert!(t.data().iter().all(|&v| v == 0.0 || v == f64::NEG_INFINITY));
        assert_eq!(t.get(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn dead_cols_and_deletion() {
        let m = MaskMatrix::from_fn(2, 3, |_, k| (k == 1).then_some(BlockReason::Causal));
        assert_eq!(m.dead_cols(), [1]);
        let d = m.without_cols(&[1]);
        assert_eq!(d.cols(), 2);
        assert!(d.dead_cols().is_empty());
    }

    proptest::proptest! {
        #[test]
        fn caption_block_is_strictly_upper_triangular(
            r in 0usize..3, k in 0usize..3, t in 0usize..3, c in 1usize..6,
        ) {
            let cats = ["a", "b", "c"];
            let m = ext(&cats[..r], &cats[..k], t, c);
            let mask = build_external_mask(&m);
            let cap = m.range(SegmentKind::Caption);
            for (qi, q) in cap.clone().enumerate() {
                for (ki, kk) in cap.clone().enumerate() {
                    proptest::prop_assert_eq!(mask.is_blocked(q, kk), ki > qi);
                }
            }
        }
    }
}
