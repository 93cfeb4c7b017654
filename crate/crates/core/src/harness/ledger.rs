//! Per-round communication and training record.

use serde::{Deserialize, Serialize};

use crate::client::PayloadCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: usize,
    pub participants: Vec<usize>,
    pub upload: PayloadCounts,
    pub download: PayloadCounts,
    pub cumulative_upload: usize,
    pub cumulative_download: usize,
    pub mean_loss_before: Option<f64>,
    pub mean_loss_after: Option<f64>,
    pub mean_balanced_acc: Option<f64>,
    pub mean_matched_acc: Option<f64>,
}

/// Flat CSV row of a [`RoundLedger`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub participants: String,
    pub up_extractor: usize,
    pub up_classifier: usize,
    pub up_prototypes: usize,
    pub up_total: usize,
    pub down_extractor: usize,
    pub down_classifier: usize,
    pub down_prototypes: usize,
    pub down_total: usize,
    pub cumulative_upload: usize,
    pub cumulative_download: usize,
    pub mean_loss_before: Option<f64>,
    pub mean_loss_after: Option<f64>,
    pub mean_balanced_acc: Option<f64>,
    pub mean_matched_acc: Option<f64>,
}

impl From<&RoundLedger> for LedgerRow {
    fn from(r: &RoundLedger) -> Self {
        let ids: Vec<String> = r.participants.iter().map(usize::to_string).collect();
        Self {
            round: r.round,
            participants: ids.join(";"),
            up_extractor: r.upload.extractor,
            up_classifier: r.upload.classifier,
            up_prototypes: r.upload.prototypes,
            up_total: r.upload.total(),
            down_extractor: r.download.extractor,
            down_classifier: r.download.classifier,
            down_prototypes: r.download.prototypes,
            down_total: r.download.total(),
            cumulative_upload: r.cumulative_upload,
            cumulative_download: r.cumulative_download,
            mean_loss_before: r.mean_loss_before,
            mean_loss_after: r.mean_loss_after,
            mean_balanced_acc: r.mean_balanced_acc,
            mean_matched_acc: r.mean_matched_acc,
        }
    }
}

/// Appends rounds while keeping running totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub rounds: Vec<RoundLedger>,
}

impl Ledger {
    pub fn cumulative(&self) -> (usize, usize) {
        self.rounds
            .last()
            .map_or((0, 0), |r| (r.cumulative_upload, r.cumulative_download))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        round: usize,
        participants: Vec<usize>,
        upload: PayloadCounts,
        download: PayloadCounts,
        mean_loss_before: Option<f64>,
        mean_loss_after: Option<f64>,
    ) {
        let (cu, cd) = self.cumulative();
        self.rounds.push(RoundLedger {
            round,
            participants,
            upload,
            download,
            cumulative_upload: cu + upload.total(),
            cumulative_download: cd + download.total(),
            mean_loss_before,
            mean_loss_after,
            mean_balanced_acc: None,
            mean_matched_acc: None,
        });
    }

    /// Attaches accuracies to the most recent round.
    pub fn annotate_last(&mut self, balanced: f64, matched: f64) {
        if let Some(r) = self.rounds.last_mut() {
            r.mean_balanced_acc = Some(balanced);
            r.mean_matched_acc = Some(matched);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommTotals {
    pub upload: PayloadCounts,
    pub download: PayloadCounts,
    pub upload_total: usize,
    pub download_total: usize,
    /// Uploads if every participant sent its whole model every round.
    pub full_model_reference: usize,
    /// `upload_total / full_model_reference`, 0 when the reference is 0.
    pub upload_ratio: f64,
}

/// Sums the ledger; `model_params` is the size of one full model.
pub fn comm_ledger_totals(ledger: &Ledger, model_params: usize) -> CommTotals {
    let mut upload = PayloadCounts::default();
    let mut download = PayloadCounts::default();
    let mut reference = 0;
    for r in &ledger.rounds {
        upload += r.upload;
        download += r.download;
        reference += r.participants.len() * model_params;
    }
    let upload_total = upload.total();
    CommTotals {
        upload,
        download,
        upload_total,
        download_total: download.total(),
        full_model_reference: reference,
        upload_ratio: if reference == 0 {
            0.0
        } else {
            upload_total as f64 / reference as f64
        },
    }
}
