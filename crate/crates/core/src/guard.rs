//! Guarded functions: ordinary functions that always run inside a domain.
//!
//! [`GuardedFunction`] marshals the arguments, runs the target in a domain
//! and applies the declared [`GuardPolicy`] when the call is violated. The
//! `#[guarded]` attribute from `domain-rewind-macros` expands to one of these.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::backend::{self, IsolationBackend, IsolationMode};
use crate::domain::{Domain, DomainConfig, DomainContext, DomainError, DomainOutcome, Elevation, DEFAULT_STACK_BYTES};
use crate::marshal::{marshal_return, Codec, MarshalError, MarshalledCall, MsgPack};
use crate::monitor::{ViolationKind, ViolationReport, REASON_CORRUPT_RESULT};
use crate::{arena::DEFAULT_ARENA_BYTES, layout, snapshot};

/// Abort reason used when a guarded target cannot decode its own arguments.
pub const REASON_BAD_ARGUMENTS: u32 = 0xffff_0004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainMode {
    /// A fresh domain is created and destroyed around every call.
    PerCall,
    /// One domain per (function, thread), reset between calls.
    Persistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OnViolation {
    ReturnError,
    FallbackValue,
    RetryThenError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardPolicy {
    pub domain_mode: DomainMode,
    pub on_violation: OnViolation,
    pub retry_limit: u32,
    pub stack_bytes: usize,
    pub arena_bytes: usize,
    pub confidentiality: bool,
}

impl Default for GuardPolicy {
    fn default() -> Self {
        GuardPolicy {
            domain_mode: DomainMode::Persistent,
            on_violation: OnViolation::ReturnError,
            retry_limit: 0,
            stack_bytes: DEFAULT_STACK_BYTES,
            arena_bytes: DEFAULT_ARENA_BYTES,
            confidentiality: false,
        }
    }
}

impl GuardPolicy {
    pub fn per_call() -> Self {
        GuardPolicy { domain_mode: DomainMode::PerCall, ..Default::default() }
    }

    pub fn persistent() -> Self {
        GuardPolicy { domain_mode: DomainMode::Persistent, ..Default::default() }
    }

    pub fn with_fallback(mut self) -> Self {
        self.on_violation = OnViolation::FallbackValue;
        self.retry_limit = 0;
        self
    }

    pub fn with_retries(mut self, retry_limit: u32) -> Self {
        self.on_violation = OnViolation::RetryThenError;
        self.retry_limit = retry_limit;
        self
    }

    pub fn with_arena_bytes(mut self, bytes: usize) -> Self {
        self.arena_bytes = bytes;
        self
    }

    pub fn validate(&self, has_fallback: bool) -> Result<(), GuardError> {
        if self.retry_limit > 0 && self.on_violation != OnViolation::RetryThenError {
            return Err(GuardError::InvalidPolicy("retry_limit > 0 needs on_violation = retry-then-error".into()));
        }
        if self.on_violation == OnViolation::FallbackValue && !has_fallback {
            return Err(GuardError::InvalidPolicy("fallback-value policy without a fallback producer".into()));
        }
        Ok(())
    }

    fn domain_config(&self) -> DomainConfig {
        DomainConfig {
            stack_bytes: self.stack_bytes,
            arena_bytes: self.arena_bytes,
            mode: if self.confidentiality { IsolationMode::Confidentiality } else { IsolationMode::Integrity },
            ..DomainConfig::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuardError {
    #[error("guarded call violated after {attempts} attempt(s): {report}")]
    Violation { report: ViolationReport, attempts: u32 },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Marshal(#[from] MarshalError),
    #[error("function id {0:?} is already registered")]
    DuplicateFunctionId(String),
    #[error("invalid guard policy: {0}")]
    InvalidPolicy(String),
}

impl GuardError {
    pub fn report(&self) -> Option<&ViolationReport> {
        match self {
            GuardError::Violation { report, .. } => Some(report),
            _ => None,
        }
    }

    pub fn attempts(&self) -> Option<u32> {
        match self {
            GuardError::Violation { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

/// How a call ended, with the number of domain executions it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation<R> {
    pub result: Result<R, GuardError>,
    pub attempts: u32,
    /// True when the value came from the fallback producer.
    pub fell_back: bool,
    /// Report of the last violated attempt, if any.
    pub last_violation: Option<ViolationReport>,
}

static REGISTRY: Mutex<Option<HashSet<String>>> = Mutex::new(None);
static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

fn register(id: &str) -> Result<(), GuardError> {
    let mut registry = REGISTRY.lock().unwrap_or_else(|p| p.into_inner());
    if !registry.get_or_insert_with(HashSet::new).insert(id.to_string()) {
        return Err(GuardError::DuplicateFunctionId(id.to_string()));
    }
    Ok(())
}

fn unregister(id: &str) {
    let mut registry = REGISTRY.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(set) = registry.as_mut() {
        set.remove(id);
    }
}

/// True when `id` names a live guarded function.
pub fn is_registered(id: &str) -> bool {
    let registry = REGISTRY.lock().unwrap_or_else(|p| p.into_inner());
    registry.as_ref().is_some_and(|set| set.contains(id))
}

thread_local! {
    static PERSISTENT: RefCell<HashMap<u64, Domain>> = RefCell::new(HashMap::new());
}

type Fallback<A, R> = Arc<dyn Fn(&A) -> R + Send + Sync>;

/// A function bound to a policy; calls go through [`invoke`](Self::invoke).
pub struct GuardedFunction<A, R> {
    id: String,
    instance: u64,
    policy: GuardPolicy,
    target: fn(A) -> R,
    fallback: Option<Fallback<A, R>>,
    backend: Arc<dyn IsolationBackend>,
    _marker: PhantomData<fn(A) -> R>,
}

impl<A, R> fmt::Debug for GuardedFunction<A, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardedFunction")
            .field("id", &self.id)
            .field("policy", &self.policy)
            .field("fallback", &self.fallback.is_some())
            .field("backend", &self.backend.kind())
            .finish()
    }
}

pub struct GuardBuilder<A, R> {
    id: String,
    target: fn(A) -> R,
    policy: GuardPolicy,
    fallback: Option<Fallback<A, R>>,
    backend: Option<Arc<dyn IsolationBackend>>,
}

impl<A, R> GuardBuilder<A, R>
where
    A: Serialize + DeserializeOwned + 'static,
    R: Serialize + DeserializeOwned + 'static,
{
    pub fn policy(mut self, policy: GuardPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Trusted producer of the value returned instead of a violated result.
    pub fn fallback(mut self, fallback: impl Fn(&A) -> R + Send + Sync + 'static) -> Self {
        self.fallback = Some(Arc::new(fallback));
        self
    }

    pub fn backend(mut self, backend: Arc<dyn IsolationBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn build(self) -> Result<GuardedFunction<A, R>, GuardError> {
        self.policy.validate(self.fallback.is_some())?;
        register(&self.id)?;
        Ok(GuardedFunction {
            id: self.id,
            instance: NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed),
            policy: self.policy,
            target: self.target,
            fallback: self.fallback,
            backend: self.backend.unwrap_or_else(backend::default_backend),
            _marker: PhantomData,
        })
    }
}

/// Registers `target` under `id` with `policy` on the default backend.
pub fn guard<A, R>(
    id: impl Into<String>,
    target: fn(A) -> R,
    policy: GuardPolicy,
) -> Result<GuardedFunction<A, R>, GuardError>
where
    A: Serialize + DeserializeOwned + 'static,
    R: Serialize + DeserializeOwned + 'static,
{
    GuardedFunction::builder(id, target).policy(policy).build()
}

impl<A, R> GuardedFunction<A, R>
where
    A: Serialize + DeserializeOwned + 'static,
    R: Serialize + DeserializeOwned + 'static,
{
    pub fn builder(id: impl Into<String>, target: fn(A) -> R) -> GuardBuilder<A, R> {
        GuardBuilder { id: id.into(), target, policy: GuardPolicy::default(), fallback: None, backend: None }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn policy(&self) -> &GuardPolicy {
        &self.policy
    }

    pub fn backend(&self) -> &Arc<dyn IsolationBackend> {
        &self.backend
    }

    /// Runs the target on `args` inside a domain.
    pub fn invoke(&self, args: A) -> Result<R, GuardError> {
        self.invoke_detailed(args).result
    }

    /// Like [`invoke`](Self::invoke), also reporting attempts and how the
    /// policy resolved the call.
    pub fn invoke_detailed(&self, args: A) -> Invocation<R> {
        let call = match MarshalledCall::encode(self.id.as_str(), &args) {
            Ok(call) => call,
            Err(e) => return Invocation { result: Err(e.into()), attempts: 0, fell_back: false, last_violation: None },
        };
        let max_attempts = match self.policy.on_violation {
            OnViolation::RetryThenError => self.policy.retry_limit.saturating_add(1),
            _ => 1,
        };
        let mut attempts = 0;
        let mut last = None;
        while attempts < max_attempts {
            attempts += 1;
            match self.attempt(&call, attempts - 1) {
                Ok(Ok(value)) => {
                    return Invocation { result: Ok(value), attempts, fell_back: false, last_violation: last }
                }
                Ok(Err(report)) => last = Some(report),
                Err(e) => return Invocation { result: Err(e), attempts, fell_back: false, last_violation: last },
            }
        }
        let report = last.expect("loop ran at least once and every pass set a report");
        if self.policy.on_violation == OnViolation::FallbackValue {
            if let Some(fallback) = &self.fallback {
                return Invocation { result: Ok(fallback(&args)), attempts, fell_back: true, last_violation: last };
            }
        }
        Invocation {
            result: Err(GuardError::Violation { report, attempts }),
            attempts,
            fell_back: false,
            last_violation: last,
        }
    }

    /// One domain execution. The inner result is the decoded value or the
    /// violation that ended the attempt.
    fn attempt(&self, call: &MarshalledCall, attempt: u32) -> Result<Result<R, ViolationReport>, GuardError> {
        let target = self.target;
        let entry = move |ctx: &mut DomainContext, input: &[u8]| -> Vec<u8> {
            let args: A = match MsgPack::decode(input) {
                Ok(args) => args,
                Err(_) => ctx.abort(REASON_BAD_ARGUMENTS),
            };
            marshal_return(&target(args))
        };
        let (outcome, domain_id) = self.with_domain(|domain| {
            domain.set_attempt(attempt);
            domain.execute(call, &entry).map(|outcome| (outcome, domain.id()))
        })?;
        Ok(match outcome {
            DomainOutcome::Completed(bytes) => match MsgPack::decode::<R>(&bytes) {
                Ok(value) => Ok(value),
                Err(_) => Err(ViolationReport::new(
                    ViolationKind::ExplicitAbort { reason: REASON_CORRUPT_RESULT },
                    domain_id,
                    snapshot::current_tid(),
                )),
            },
            DomainOutcome::Violated(report) => Err(report),
        })
    }

    fn with_domain<T>(&self, run: impl FnOnce(&Domain) -> Result<T, DomainError>) -> Result<T, GuardError> {
        // Called from inside another domain, a thread-local cache would be
        // allocated in that domain's arena; use a one-off domain instead.
        let nested = layout::current_control().is_some();
        if nested {
            // The backend handle and the new domain's bookkeeping live in
            // trusted memory, which the enclosing domain may not write.
            let _elevated = Elevation::raise();
            let domain = Domain::create(self.backend.clone(), self.policy.domain_config())?;
            let result = run(&domain);
            domain.destroy()?;
            drop(domain);
            return Ok(result?);
        }
        if self.policy.domain_mode == DomainMode::PerCall {
            let domain = Domain::create(self.backend.clone(), self.policy.domain_config())?;
            let result = run(&domain);
            domain.destroy()?;
            return Ok(result?);
        }
        let domain = PERSISTENT.with(|map| -> Result<Domain, DomainError> {
            let mut map = map.borrow_mut();
            if let Some(domain) = map.get(&self.instance) {
                return Ok(domain.clone());
            }
            let domain = Domain::create(self.backend.clone(), self.policy.domain_config())?;
            map.insert(self.instance, domain.clone());
            Ok(domain)
        })?;
        Ok(run(&domain)?)
    }

    /// Drops this thread's persistent domain for the function, releasing its
    /// key. The next call on this thread creates a new one.
    pub fn release_thread_domain(&self) {
        let _ = PERSISTENT.try_with(|map| map.borrow_mut().remove(&self.instance));
    }
}

impl<A, R> Drop for GuardedFunction<A, R> {
    fn drop(&mut self) {
        let instance = self.instance;
        let _ = PERSISTENT.try_with(|map| map.borrow_mut().remove(&instance));
        unregister(&self.id);
    }
}
