//! Allocation tracker attributing buffer bytes to data, loss and gradient categories.
//!
//! A [`MemoryTracker`] keeps a live and a peak byte counter per [`Category`]. Buffers
//! created through [`crate::matrix::Buffer`] charge the tracker that is active on the
//! current thread: [`MemoryTracker::scope`] pushes a `(tracker, category)` pair onto a
//! thread-local stack and the guard pops it again. Scopes nest but must close in LIFO
//! order; anything else is reported as [`Error::Usage`].
//!
//! Trackers can be chained with [`MemoryTracker::child`] so that a per-worker tracker also
//! feeds an aggregate one.

use std::cell::RefCell;
use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Data,
    Loss,
    Gradient,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Data, Category::Loss, Category::Gradient];

    fn index(self) -> usize {
        match self {
            Category::Data => 0,
            Category::Loss => 1,
            Category::Gradient => 2,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Data => "data",
            Category::Loss => "loss",
            Category::Gradient => "gradient",
        })
    }
}

#[derive(Default)]
struct Counter {
    live: AtomicU64,
    peak: AtomicU64,
}

struct Inner {
    counters: [Counter; 3],
    loss_ceiling: Option<u64>,
    parent: Option<MemoryTracker>,
    misuse: Mutex<Option<String>>,
    poisoned: AtomicBool,
}

/// Shared handle to a set of per-category byte counters.
#[derive(Clone)]
pub struct MemoryTracker(Arc<Inner>);

impl Default for MemoryTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for MemoryTracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("MemoryTracker");
        for cat in Category::ALL {
            s.field(&cat.to_string(), &(self.live(cat), self.peak(cat)));
        }
        s.finish()
    }
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::build(None, None)
    }

    /// A tracker that refuses loss-buffer allocations pushing the live total past `bytes`.
    pub fn with_loss_ceiling(bytes: u64) -> Self {
        Self::build(Some(bytes), None)
    }

    /// A tracker whose charges are also forwarded to `self`.
    pub fn child(&self) -> Self {
        Self::build(None, Some(self.clone()))
    }

    pub fn child_with_loss_ceiling(&self, ceiling: Option<u64>) -> Self {
        Self::build(ceiling, Some(self.clone()))
    }

    fn build(loss_ceiling: Option<u64>, parent: Option<MemoryTracker>) -> Self {
        Self(Arc::new(Inner {
            counters: Default::default(),
            loss_ceiling,
            parent,
            misuse: Mutex::new(None),
            poisoned: AtomicBool::new(false),
        }))
    }

    pub fn live(&self, cat: Category) -> u64 {
        self.0.counters[cat.index()].live.load(Ordering::SeqCst)
    }

    pub fn peak(&self, cat: Category) -> u64 {
        self.0.counters[cat.index()].peak.load(Ordering::SeqCst)
    }

    pub fn live_total(&self) -> u64 {
        Category::ALL.iter().map(|&c| self.live(c)).sum()
    }

    /// Opens a scope on the current thread; allocations inside it are charged to `cat`.
    pub fn scope(&self, cat: Category) -> ScopeGuard {
        let id = SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            let id = s.next_id;
            s.next_id += 1;
            s.stack.push(Frame {
                id,
                tracker: self.clone(),
                category: cat,
            });
            id
        });
        ScopeGuard {
            id,
            tracker: self.clone(),
            closed: false,
            _not_send: PhantomData,
        }
    }

    /// First scope-nesting violation observed on this tracker, if any.
    pub fn check(&self) -> Result<()> {
        if self.0.poisoned.load(Ordering::SeqCst) {
            let msg = self
                .0
                .misuse
                .lock()
                .map(|m| m.clone())
                .unwrap_or_default()
                .unwrap_or_else(|| "unbalanced scope".into());
            return Err(Error::Usage(msg));
        }
        Ok(())
    }

    fn poison(&self, msg: String) {
        if let Ok(mut m) = self.0.misuse.lock() {
            m.get_or_insert(msg);
        }
        self.0.poisoned.store(true, Ordering::SeqCst);
    }

    pub(crate) fn acquire(&self, cat: Category, bytes: u64, enforce: bool) -> Result<Lease> {
        self.charge(cat, bytes, enforce)?;
        Ok(Lease {
            tracker: self.clone(),
            category: cat,
            bytes,
        })
    }

    fn charge(&self, cat: Category, bytes: u64, enforce: bool) -> Result<()> {
        let counter = &self.0.counters[cat.index()];
        let live = counter.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        if enforce && cat == Category::Loss {
            if let Some(ceiling) = self.0.loss_ceiling {
                if live > ceiling {
                    counter.live.fetch_sub(bytes, Ordering::SeqCst);
                    return Err(Error::OutOfMemory {
                        requested: bytes,
                        live: live - bytes,
                        ceiling,
                    });
                }
            }
        }
        if let Some(parent) = &self.0.parent {
            if let Err(e) = parent.charge(cat, bytes, enforce) {
                counter.live.fetch_sub(bytes, Ordering::SeqCst);
                return Err(e);
            }
        }
        counter.peak.fetch_max(live, Ordering::SeqCst);
        Ok(())
    }

    fn release(&self, cat: Category, bytes: u64) {
        self.0.counters[cat.index()]
            .live
            .fetch_sub(bytes, Ordering::SeqCst);
        if let Some(parent) = &self.0.parent {
            parent.release(cat, bytes);
        }
    }
}

/// Bytes charged to a tracker; released on drop.
pub(crate) struct Lease {
    tracker: MemoryTracker,
    category: Category,
    bytes: u64,
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.tracker.release(self.category, self.bytes);
    }
}

impl fmt::Debug for Lease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lease({} {} bytes)", self.category, self.bytes)
    }
}

struct Frame {
    id: u64,
    tracker: MemoryTracker,
    category: Category,
}

#[derive(Default)]
struct Scopes {
    next_id: u64,
    stack: Vec<Frame>,
}

thread_local! {
    static SCOPES: RefCell<Scopes> = RefCell::new(Scopes::default());
}

/// Closes its scope when dropped or via [`ScopeGuard::close`].
#[must_use = "the scope closes as soon as the guard is dropped"]
pub struct ScopeGuard {
    id: u64,
    tracker: MemoryTracker,
    closed: bool,
    _not_send: PhantomData<*const ()>,
}

impl ScopeGuard {
    /// Closes the scope, failing if it is not the innermost one open on this thread.
    pub fn close(mut self) -> Result<()> {
        self.closed = true;
        self.pop()
    }

    fn pop(&self) -> Result<()> {
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            match s.stack.last() {
                Some(top) if top.id == self.id => {
                    s.stack.pop();
                    Ok(())
                }
                _ => {
                    s.stack.retain(|f| f.id != self.id);
                    let msg = format!(
                        "scope #{} closed while an inner scope was still open",
                        self.id
                    );
                    self.tracker.poison(msg.clone());
                    Err(Error::Usage(msg))
                }
            }
        })
    }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.pop();
        }
    }
}

/// The tracker and category active on the current thread, capturable for child threads.
#[derive(Clone)]
pub struct Context {
    pub tracker: MemoryTracker,
    pub category: Category,
}

impl Context {
    pub fn current() -> Option<Context> {
        SCOPES.with(|s| {
            s.borrow().stack.last().map(|f| Context {
                tracker: f.tracker.clone(),
                category: f.category,
            })
        })
    }

    pub fn enter(&self) -> ScopeGuard {
        self.tracker.scope(self.category)
    }
}

/// Opens a `cat` scope on whichever tracker is active on this thread, if any.
pub fn scoped(cat: Category) -> Option<ScopeGuard> {
    Context::current().map(|ctx| ctx.tracker.scope(cat))
}

pub(crate) fn charge_current(bytes: u64, enforce: bool) -> Result<Option<Lease>> {
    match Context::current() {
        Some(ctx) => ctx.tracker.acquire(ctx.category, bytes, enforce).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Buffer;

    const MB: usize = 1 << 20;

    #[test]
    fn single_allocation_peaks_then_frees() {
        let t = MemoryTracker::new();
        {
            let _s = t.scope(Category::Loss);
            let b = Buffer::<u8>::zeros(MB).unwrap();
            assert_eq!(t.live(Category::Loss), MB as u64);
            drop(b);
        }
        assert_eq!(t.peak(Category::Loss), MB as u64);
        assert_eq!(t.live(Category::Loss), 0);
    }

    #[test]
    fn sequential_allocations_do_not_stack() {
        let t = MemoryTracker::new();
        let _s = t.scope(Category::Loss);
        drop(Buffer::<u8>::zeros(MB).unwrap());
        drop(Buffer::<u8>::zeros(MB).unwrap());
        assert_eq!(t.peak(Category::Loss), MB as u64);
    }

    #[test]
    fn overlapping_allocations_stack() {
        let t = MemoryTracker::new();
        let _s = t.scope(Category::Loss);
        let a = Buffer::<u8>::zeros(MB).unwrap();
        let b = Buffer::<u8>::zeros(MB).unwrap();
        assert_eq!(t.peak(Category::Loss), 2 * MB as u64);
        drop((a, b));
        assert_eq!(t.live(Category::Loss), 0);
    }

    #[test]
    fn nested_scopes_attribute_to_innermost() {
        let t = MemoryTracker::new();
        let outer = t.scope(Category::Data);
        let _d = Buffer::<u8>::zeros(10).unwrap();
        let inner = t.scope(Category::Gradient);
        let _g = Buffer::<u8>::zeros(20).unwrap();
        inner.close().unwrap();
        let _d2 = Buffer::<u8>::zeros(5).unwrap();
        outer.close().unwrap();
        assert_eq!(t.live(Category::Data), 15);
        assert_eq!(t.live(Category::Gradient), 20);
        assert_eq!(t.live(Category::Loss), 0);
    }

    #[test]
    fn unbalanced_close_is_a_usage_error() {
        let t = MemoryTracker::new();
        let outer = t.scope(Category::Data);
        let _inner = t.scope(Category::Loss);
        assert!(matches!(outer.close(), Err(Error::Usage(_))));
        assert!(matches!(t.check(), Err(Error::Usage(_))));
    }

    #[test]
    fn no_scope_means_untracked() {
        let t = MemoryTracker::new();
        let _b = Buffer::<u8>::zeros(64).unwrap();
        assert_eq!(t.live_total(), 0);
    }

    #[test]
    fn ceiling_rejects_loss_allocations() {
        let t = MemoryTracker::with_loss_ceiling(100);
        let _s = t.scope(Category::Loss);
        let _a = Buffer::<u8>::zeros(60).unwrap();
        let err = Buffer::<u8>::zeros(60).unwrap_err();
        assert!(matches!(err, Error::OutOfMemory { ceiling: 100, .. }));
        assert_eq!(t.live(Category::Loss), 60);
    }

    #[test]
    fn children_feed_the_parent() {
        let total = MemoryTracker::new();
        let w0 = total.child();
        let w1 = total.child();
        let a = {
            let _s = w0.scope(Category::Loss);
            Buffer::<u8>::zeros(100).unwrap()
        };
        let b = {
            let _s = w1.scope(Category::Loss);
            Buffer::<u8>::zeros(50).unwrap()
        };
        assert_eq!(total.peak(Category::Loss), 150);
        assert_eq!(w0.peak(Category::Loss), 100);
        drop((a, b));
        assert_eq!(total.live(Category::Loss), 0);
    }

    #[test]
    fn concurrent_reporting_keeps_peak_sound() {
        use std::sync::atomic::AtomicU64;
        let t = MemoryTracker::new();
        let sampled_max = AtomicU64::new(0);
        std::thread::scope(|s| {
            for _ in 0..4 {
                let ctx = Context {
                    tracker: t.clone(),
                    category: Category::Loss,
                };
                let t = t.clone();
                let sampled_max = &sampled_max;
                s.spawn(move || {
                    let _g = ctx.enter();
                    for i in 0..200 {
                        let buf = Buffer::<u8>::zeros(1 + i % 17).unwrap();
                        sampled_max.fetch_max(t.live(Category::Loss), Ordering::SeqCst);
                        drop(buf);
                    }
                });
            }
        });
        assert!(t.peak(Category::Loss) >= sampled_max.load(Ordering::SeqCst));
        assert_eq!(t.live(Category::Loss), 0);
    }
}
