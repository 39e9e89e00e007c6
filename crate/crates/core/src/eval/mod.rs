//! Alignment-score and preference-rank evaluation over result manifests.

mod alignment;
mod ranking;

pub use alignment::{
    alignment_csv, alignment_scores, format_alignment_table, parse_results, read_results, AlignmentReport,
    MethodAlignment, ResultRecord,
};
pub use ranking::{
    aggregate_rankings, format_rank_table, parse_ballots, rankings_csv, read_ballots, Ballot, BallotSet,
};
