//! `#[guarded]`: run a function inside a rewindable isolation domain.
//!
//! The annotated function keeps its name and parameters but returns
//! `Result<R, domain_rewind::GuardError>`. Its body moves into a private
//! target function that receives the arguments as one tuple; the wrapper
//! marshals them into a domain through a lazily built
//! `domain_rewind::GuardedFunction`.

use proc_macro::TokenStream;
use proc_macro2::Span;
use quote::{format_ident, quote};
use syn::spanned::Spanned;
use syn::{parse_macro_input, Expr, FnArg, ItemFn, LitStr, Path, ReturnType, Type};

#[derive(Default)]
struct Options {
    id: Option<LitStr>,
    mode: Option<LitStr>,
    on_violation: Option<LitStr>,
    retry_limit: Option<Expr>,
    fallback: Option<Expr>,
    stack_bytes: Option<Expr>,
    arena_bytes: Option<Expr>,
    backend: Option<Expr>,
    confidentiality: bool,
    krate: Option<Path>,
}

/// Runs the function inside a domain; see the crate docs.
///
/// Options, all optional:
///
/// - `id = "name"`: registry id, defaults to the module path plus the name
/// - `mode = "persistent" | "per-call"`
/// - `on_violation = "return-error" | "fallback" | "retry"`
/// - `retry_limit = N`: implies `on_violation = "retry"`
/// - `fallback = expr`: `Fn(&(args,)) -> R`, run outside the domain; implies
///   `on_violation = "fallback"`
/// - `stack_bytes = N`, `arena_bytes = N`, `confidentiality`
/// - `backend = expr`: an `Arc<dyn IsolationBackend>`
///
/// ```ignore
/// #[guarded(fallback = |_| 0)]
/// fn add(a: u32, b: u32) -> u32 {
///     a + b
/// }
///
/// assert_eq!(add(2, 5), Ok(7));
/// ```
#[proc_macro_attribute]
pub fn guarded(attr: TokenStream, item: TokenStream) -> TokenStream {
    let mut options = Options::default();
    let parser = syn::meta::parser(|meta| {
        let set_lit = |slot: &mut Option<LitStr>| -> syn::Result<()> {
            *slot = Some(meta.value()?.parse()?);
            Ok(())
        };
        if meta.path.is_ident("id") {
            set_lit(&mut options.id)
        } else if meta.path.is_ident("mode") {
            set_lit(&mut options.mode)
        } else if meta.path.is_ident("on_violation") {
            set_lit(&mut options.on_violation)
        } else if meta.path.is_ident("retry_limit") {
            options.retry_limit = Some(meta.value()?.parse()?);
            Ok(())
        } else if meta.path.is_ident("fallback") {
            options.fallback = Some(meta.value()?.parse()?);
            Ok(())
        } else if meta.path.is_ident("stack_bytes") {
            options.stack_bytes = Some(meta.value()?.parse()?);
            Ok(())
        } else if meta.path.is_ident("arena_bytes") {
            options.arena_bytes = Some(meta.value()?.parse()?);
            Ok(())
        } else if meta.path.is_ident("backend") {
            options.backend = Some(meta.value()?.parse()?);
            Ok(())
        } else if meta.path.is_ident("confidentiality") {
            options.confidentiality = true;
            Ok(())
        } else if meta.path.is_ident("crate") {
            let lit: LitStr = meta.value()?.parse()?;
            options.krate = Some(lit.parse()?);
            Ok(())
        } else {
            Err(meta.error("unknown guarded option"))
        }
    });
    parse_macro_input!(attr with parser);
    let func = parse_macro_input!(item as ItemFn);
    expand(options, func).unwrap_or_else(|e| e.to_compile_error()).into()
}

fn expand(options: Options, func: ItemFn) -> syn::Result<proc_macro2::TokenStream> {
    let sig = &func.sig;
    if let Some(asyncness) = &sig.asyncness {
        return Err(syn::Error::new(asyncness.span(), "guarded functions cannot be async"));
    }
    if !sig.generics.params.is_empty() {
        return Err(syn::Error::new(sig.generics.span(), "guarded functions cannot be generic"));
    }

    let mut patterns = Vec::new();
    let mut types = Vec::new();
    let mut outer_args = Vec::new();
    let mut forwarded = Vec::new();
    for (i, input) in sig.inputs.iter().enumerate() {
        let FnArg::Typed(arg) = input else {
            return Err(syn::Error::new(input.span(), "guarded functions cannot take self"));
        };
        if let Type::Reference(r) = &*arg.ty {
            return Err(syn::Error::new(r.span(), "guarded arguments cross the domain by value; take an owned type"));
        }
        let name = format_ident!("__guarded_arg{}", i);
        let ty = &arg.ty;
        patterns.push(arg.pat.clone());
        types.push(ty.clone());
        outer_args.push(quote!(#name: #ty));
        forwarded.push(name);
    }

    let krate = options.krate.clone().unwrap_or_else(|| syn::parse_quote!(::domain_rewind));
    let ret: Type = match &sig.output {
        ReturnType::Default => syn::parse_quote!(()),
        ReturnType::Type(_, ty) => (**ty).clone(),
    };
    let id = match &options.id {
        Some(lit) => quote!(#lit),
        None => {
            let name = &sig.ident;
            quote!(::core::concat!(::core::module_path!(), "::", ::core::stringify!(#name)))
        }
    };

    let mode = match options.mode.as_ref().map(|l| l.value()).as_deref() {
        None | Some("persistent") => quote!(#krate::DomainMode::Persistent),
        Some("per-call") | Some("per_call") => quote!(#krate::DomainMode::PerCall),
        Some(_) => {
            return Err(syn::Error::new(
                options.mode.as_ref().map_or_else(Span::call_site, |l| l.span()),
                "mode is \"persistent\" or \"per-call\"",
            ))
        }
    };
    let on_violation = match options.on_violation.as_ref().map(|l| l.value()).as_deref() {
        Some("return-error") => quote!(#krate::OnViolation::ReturnError),
        Some("fallback") | Some("fallback-value") => quote!(#krate::OnViolation::FallbackValue),
        Some("retry") | Some("retry-then-error") => quote!(#krate::OnViolation::RetryThenError),
        Some(_) => {
            return Err(syn::Error::new(
                options.on_violation.as_ref().map_or_else(Span::call_site, |l| l.span()),
                "on_violation is \"return-error\", \"fallback\" or \"retry\"",
            ))
        }
        None if options.fallback.is_some() => quote!(#krate::OnViolation::FallbackValue),
        None if options.retry_limit.is_some() => quote!(#krate::OnViolation::RetryThenError),
        None => quote!(#krate::OnViolation::ReturnError),
    };
    let retry_limit = options.retry_limit.as_ref().map(|e| quote!(#e)).unwrap_or(quote!(0));
    let stack_bytes = match &options.stack_bytes {
        Some(e) => quote!(#e),
        None => quote!(#krate::domain::DEFAULT_STACK_BYTES),
    };
    let arena_bytes = match &options.arena_bytes {
        Some(e) => quote!(#e),
        None => quote!(#krate::arena::DEFAULT_ARENA_BYTES),
    };
    let confidentiality = options.confidentiality;
    let fallback = options.fallback.as_ref().map(|e| quote!(.fallback(#e)));
    let backend = options.backend.as_ref().map(|e| quote!(.backend(#e)));

    let attrs = &func.attrs;
    let vis = &func.vis;
    let name = &sig.ident;
    let body = &func.block;
    let target = syn::Ident::new("__guarded_target", Span::mixed_site());
    let guard_static = syn::Ident::new("__GUARDED", Span::mixed_site());

    Ok(quote! {
        #(#attrs)*
        #vis fn #name(#(#outer_args),*) -> ::core::result::Result<#ret, #krate::GuardError> {
            fn #target((#(#patterns,)*): (#(#types,)*)) -> #ret #body

            static #guard_static: ::std::sync::OnceLock<
                ::core::result::Result<#krate::GuardedFunction<(#(#types,)*), #ret>, #krate::GuardError>,
            > = ::std::sync::OnceLock::new();
            let guarded = #guard_static.get_or_init(|| {
                let policy = #krate::GuardPolicy {
                    domain_mode: #mode,
                    on_violation: #on_violation,
                    retry_limit: #retry_limit,
                    stack_bytes: #stack_bytes,
                    arena_bytes: #arena_bytes,
                    confidentiality: #confidentiality,
                };
                #krate::GuardedFunction::builder(#id, #target as fn((#(#types,)*)) -> #ret)
                    .policy(policy)
                    #fallback
                    #backend
                    .build()
            });
            match guarded {
                ::core::result::Result::Ok(guarded) => guarded.invoke((#(#forwarded,)*)),
                ::core::result::Result::Err(error) => ::core::result::Result::Err(::core::clone::Clone::clone(error)),
            }
        }
    })
}
