//! Metrics for referring, grounding, advanced and next-action tasks.
//!
//! Box literals follow the grammar `[x1, y1, x2, y2]` with integer pixel
//! coordinates; see [`extract_boxes`].

mod matching;
mod report;
mod score;

pub use matching::{greedy_multi_iou, iou, iou_exact, max_weight_assignment, multi_iou};
pub use report::{fixed, metric_name, Cell, EvalReport, ScoreSheet, MULTI_IOU_NOTE, TABLE_PLATFORMS};
pub use score::{
    build_scoring_request, extract_boxes, guide_self_prediction, iou_at_least, normalize, parse_score, rational,
    read_jsonl, score_advanced, score_advanced_batch, score_elementary, score_elementary_one, score_guide,
    scoring_template, self_prediction, strip_boxes, AdvancedScore, EvalError, ExactMatch, GuideSample, Prediction,
    PredictionLine, PredictionSet, TextSimilarity, TokenF1, GROUNDING_THRESHOLD, RED_BOX_STROKE,
};
