use std::fmt;

use super::StrategyKind;

/// Column order of [`MemoryReport::csv_row`].
pub const CSV_HEADER: &str = "strategy,b,n,c,t_r,t_c,dtype_width,data_bytes,loss_peak,grad_peak";

/// Peak bytes seen by one tracker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkerMemory {
    pub data_bytes: u64,
    pub loss_buffer_bytes: u64,
    pub gradient_temp_bytes: u64,
}

/// Measured memory of one forward + backward run.
///
/// The top-level byte counts are the largest per-worker peaks (what one device has to
/// hold); `aggregate` sums every worker's live bytes before taking the peak.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub strategy: StrategyKind,
    pub b: usize,
    pub n: usize,
    pub c: usize,
    pub t_r: usize,
    pub t_c: usize,
    pub dtype_width: usize,
    pub data_bytes: u64,
    pub loss_buffer_bytes: u64,
    pub gradient_temp_bytes: u64,
    pub per_worker: Vec<WorkerMemory>,
    pub aggregate: WorkerMemory,
    pub analytic_loss_elements: u64,
    pub backbone_bytes: u64,
    /// Loss value of the run, as a sanity echo.
    pub loss: f64,
}

impl MemoryReport {
    pub fn analytic_loss_bytes(&self) -> u64 {
        self.analytic_loss_elements * self.dtype_width as u64
    }

    /// Measured / analytic loss-buffer bytes.
    pub fn analytic_ratio(&self) -> f64 {
        self.loss_buffer_bytes as f64 / self.analytic_loss_bytes() as f64
    }

    pub fn peak_bytes(&self) -> u64 {
        super::peak_total(self.data_bytes, self.loss_buffer_bytes, self.backbone_bytes)
    }

    /// Data bytes when only one accumulation micro-batch of `micro_batch` rows per worker is
    /// resident on the device at a time.
    pub fn offloaded_data_bytes(&self, micro_batch: usize) -> u64 {
        let shard = if self.strategy.is_distributed() { self.b / self.n } else { self.b };
        let rows = micro_batch.clamp(1, shard.max(1)) as u64;
        self.data_bytes * rows / shard.max(1) as u64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.b,
            self.n,
            self.c,
            self.t_r,
            self.t_c,
            self.dtype_width,
            self.data_bytes,
            self.loss_buffer_bytes,
            self.gradient_temp_bytes
        )
    }
}

fn human(bytes: u64) -> String {
    const UNITS: [&str; 4] = ["B", "KiB", "MiB", "GiB"];
    let mut v = bytes as f64;
    let mut unit = 0;
    while v >= 1024.0 && unit + 1 < UNITS.len() {
        v /= 1024.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[unit])
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "strategy {} | b={} n={} c={} tile={}x{} width={}",
            self.strategy, self.b, self.n, self.c, self.t_r, self.t_c, self.dtype_width
        )?;
        writeln!(f, "{:<8} {:>14} {:>14} {:>14}", "worker", "data", "loss peak", "grad peak")?;
        for (w, m) in self.per_worker.iter().enumerate() {
            writeln!(
                f,
                "{:<8} {:>14} {:>14} {:>14}",
                w,
                human(m.data_bytes),
                human(m.loss_buffer_bytes),
                human(m.gradient_temp_bytes)
            )?;
        }
        writeln!(
            f,
            "{:<8} {:>14} {:>14} {:>14}",
            "total",
            human(self.aggregate.data_bytes),
            human(self.aggregate.loss_buffer_bytes),
            human(self.aggregate.gradient_temp_bytes)
        )?;
        writeln!(
            f,
            "analytic loss buffer {} (measured/analytic {:.3})",
            human(self.analytic_loss_bytes()),
            self.analytic_ratio()
        )?;
        write!(
            f,
            "peak per worker = data + max(loss, backbone) = {}",
            human(self.peak_bytes())
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MemoryReport {
        MemoryReport {
            strategy: StrategyKind::MultiLevel,
            b: 64,
            n: 4,
            c: 8,
            t_r: 4,
            t_c: 4,
            dtype_width: 8,
            data_bytes: 3 * 16 * 8 * 8,
            loss_buffer_bytes: 320,
            gradient_temp_bytes: 2048,
            per_worker: vec![WorkerMemory::default(); 4],
            aggregate: WorkerMemory::default(),
            analytic_loss_elements: 32,
            backbone_bytes: 1000,
            loss: 0.0,
        }
    }

    #[test]
    fn csv_column_order() {
        assert_eq!(report().csv_row(), "inf,64,4,8,4,4,8,3072,320,2048");
        assert_eq!(CSV_HEADER.split(',').count(), report().csv_row().split(',').count());
    }

    #[test]
    fn derived_quantities() {
        let r = report();
        assert_eq!(r.analytic_loss_bytes(), 256);
        assert!((r.analytic_ratio() - 1.25).abs() < 1e-12);
        assert_eq!(r.peak_bytes(), 3072 + 1000);
        assert_eq!(r.offloaded_data_bytes(4), 3072 / 4);
        assert_eq!(r.offloaded_data_bytes(1000), 3072);
        assert!(r.to_string().contains("total"));
    }
}
