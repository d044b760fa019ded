"""Hot loops of the sum-of-trees sampler.

Chain state lives in per-tree arenas: row ``t`` of each ``(K, cap)`` array
holds the nodes of tree ``t``.  Node codes in ``var``: ``>= 0`` split
variable, ``-1`` leaf, ``-2`` free slot.  Node 0 is always the root.  Since
accepted trees never have empty leaves, a tree over ``N`` rows has at most
``2N - 1`` live nodes, so ``cap = 2N + 1`` never overflows.

Retained draws are written out in preorder: the left child of an internal
node follows it directly, the right child sits at ``start + right``.
"""

import math

import numpy as np

from ._jit import njit

LEAF = -1
FREE = -2

GROW, PRUNE, CHANGE = 0, 1, 2
LOG_QUARTER = math.log(0.25)
LOG_2PI = math.log(2.0 * math.pi)
PROB_CLAMP = 1e-12


@njit
def node_loglik_reduced(n, s, sigma2, sigma_mu2):
    # leaf-integrated log likelihood without the SSR and n*log(2*pi*sigma2)
    # terms; those are identical across trees fitted to the same residuals
    denom = sigma2 + n * sigma_mu2
    return 0.5 * math.log(sigma2 / denom) + sigma_mu2 * s * s / (2.0 * sigma2 * denom)


@njit
def std_normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@njit
def trunc_std_normal_above(a, rng):
    """Draw ``z ~ N(0, 1)`` conditioned on ``z > a``."""
    if a <= 0.0:
        while True:
            z = rng.standard_normal()
            if z > a:
                return z
    # exponential proposal with the optimal rate (Robert 1995)
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.standard_exponential() / lam
        if rng.random() <= math.exp(-0.5 * (z - lam) * (z - lam)):
            return z


@njit
def draw_latent(y, g, z, rng):
    for i in range(y.shape[0]):
        if y[i] > 0.5:
            z[i] = g[i] + trunc_std_normal_above(-g[i], rng)
        else:
            z[i] = g[i] - trunc_std_normal_above(g[i], rng)


@njit
def draw_categorical(s_cum, rng):
    u = rng.random()
    j = np.searchsorted(s_cum, u, side="right")
    if j >= s_cum.shape[0]:
        j = s_cum.shape[0] - 1
    return j


@njit
def _alloc(t, var, n_used):
    for k in range(1, n_used[t]):
        if var[t, k] == FREE:
            return k
    k = n_used[t]
    n_used[t] = k + 1
    return k


@njit
def _is_ancestor(z, node, parent, t):
    while True:
        if node == z:
            return True
        if node == 0:
            return False
        node = parent[t, node]


@njit
def _route_from(k, var, cut, left, right, t, X, i):
    while var[t, k] >= 0:
        if X[i, var[t, k]] <= cut[t, k]:
            k = left[t, k]
        else:
            k = right[t, k]
    return k


@njit
def leaf_sufficient_stats(t, n_used, leaf_of, r, cnt, sm):
    for k in range(n_used[t]):
        cnt[k] = 0.0
        sm[k] = 0.0
    for i in range(r.shape[0]):
        k = leaf_of[t, i]
        cnt[k] += 1.0
        sm[k] += r[i]


@njit
def mh_step(t, var, cut, mu, left, right, parent, depth, n_used, leaf_of, r, X,
            cut_values, cut_ptr, s_cum, alpha, beta, sigma2, sigma_mu2, rng,
            cnt, sm, cnt2, sm2, new_leaf, moves):
    """One Metropolis-Hastings GROW/PRUNE/CHANGE update of tree ``t``.

    ``moves`` accumulates proposal counts in slots 0-2 and acceptances in 3-5.
    Returns the move code, or -1 if no proposal could be formed.
    """
    N = r.shape[0]
    nu_ = n_used[t]
    leaf_sufficient_stats(t, n_used, leaf_of, r, cnt, sm)
    n_leaves = 0
    n_int = 0
    n_nog = 0
    for k in range(nu_):
        v = var[t, k]
        if v == LEAF:
            n_leaves += 1
        elif v >= 0:
            n_int += 1
            if var[t, left[t, k]] == LEAF and var[t, right[t, k]] == LEAF:
                n_nog += 1

    if n_int == 0:
        move = GROW
    else:
        u = rng.random()
        if u < 0.25:
            move = GROW
        elif u < 0.5:
            move = PRUNE
        else:
            move = CHANGE
    moves[move] += 1

    if move == GROW:
        pick = int(rng.random() * n_leaves)
        eta = -1
        seen = 0
        for k in range(nu_):
            if var[t, k] == LEAF:
                if seen == pick:
                    eta = k
                    break
                seen += 1
        j = draw_categorical(s_cum, rng)
        nc = cut_ptr[j + 1] - cut_ptr[j]
        if nc == 0:
            return move
        c = cut_values[cut_ptr[j] + int(rng.random() * nc)]
        na = 0.0
        sa = 0.0
        nb = 0.0
        sb = 0.0
        for i in range(N):
            if leaf_of[t, i] == eta:
                if X[i, j] <= c:
                    na += 1.0
                    sa += r[i]
                else:
                    nb += 1.0
                    sb += r[i]
        if na == 0.0 or nb == 0.0:
            return move
        d = depth[t, eta]
        p_here = alpha * (1.0 + d) ** (-beta)
        p_child = alpha * (2.0 + d) ** (-beta)
        log_r = math.log(p_here) + 2.0 * math.log(1.0 - p_child) - math.log(1.0 - p_here)
        nog_new = n_nog + 1
        if eta != 0:
            par = parent[t, eta]
            sib = right[t, par] if left[t, par] == eta else left[t, par]
            if var[t, sib] == LEAF:
                nog_new -= 1
        log_pg = 0.0 if n_int == 0 else LOG_QUARTER
        log_r += LOG_QUARTER - math.log(nog_new) - log_pg + math.log(n_leaves)
        log_r += (node_loglik_reduced(na, sa, sigma2, sigma_mu2)
                  + node_loglik_reduced(nb, sb, sigma2, sigma_mu2)
                  - node_loglik_reduced(cnt[eta], sm[eta], sigma2, sigma_mu2))
        if math.log(rng.random()) < log_r:
            a = _alloc(t, var, n_used)
            var[t, a] = LEAF
            b = _alloc(t, var, n_used)
            for node in (a, b):
                var[t, node] = LEAF
                cut[t, node] = 0.0
                mu[t, node] = 0.0
                left[t, node] = -1
                right[t, node] = -1
                parent[t, node] = eta
                depth[t, node] = d + 1
            var[t, eta] = j
            cut[t, eta] = c
            left[t, eta] = a
            right[t, eta] = b
            for i in range(N):
                if leaf_of[t, i] == eta:
                    leaf_of[t, i] = a if X[i, j] <= c else b
            moves[3 + move] += 1
        return move

    if move == PRUNE:
        pick = int(rng.random() * n_nog)
        z = -1
        seen = 0
        for k in range(nu_):
            if var[t, k] >= 0 and var[t, left[t, k]] == LEAF and var[t, right[t, k]] == LEAF:
                if seen == pick:
                    z = k
                    break
                seen += 1
        a = left[t, z]
        b = right[t, z]
        d = depth[t, z]
        p_here = alpha * (1.0 + d) ** (-beta)
        p_child = alpha * (2.0 + d) ** (-beta)
        log_r = math.log(1.0 - p_here) - math.log(p_here) - 2.0 * math.log(1.0 - p_child)
        log_pg_new = 0.0 if n_int == 1 else LOG_QUARTER
        log_r += log_pg_new - math.log(n_leaves - 1) - LOG_QUARTER + math.log(n_nog)
        log_r += (node_loglik_reduced(cnt[a] + cnt[b], sm[a] + sm[b], sigma2, sigma_mu2)
                  - node_loglik_reduced(cnt[a], sm[a], sigma2, sigma_mu2)
                  - node_loglik_reduced(cnt[b], sm[b], sigma2, sigma_mu2))
        if math.log(rng.random()) < log_r:
            var[t, z] = LEAF
            cut[t, z] = 0.0
            left[t, z] = -1
            right[t, z] = -1
            var[t, a] = FREE
            var[t, b] = FREE
            for i in range(N):
                if leaf_of[t, i] == a or leaf_of[t, i] == b:
                    leaf_of[t, i] = z
            moves[3 + move] += 1
        return move

    # CHANGE
    pick = int(rng.random() * n_int)
    z = -1
    seen = 0
    for k in range(nu_):
        if var[t, k] >= 0:
            if seen == pick:
                z = k
                break
            seen += 1
    j = draw_categorical(s_cum, rng)
    nc = cut_ptr[j + 1] - cut_ptr[j]
    if nc == 0:
        return move
    c = cut_values[cut_ptr[j] + int(rng.random() * nc)]
    old_j = var[t, z]
    old_c = cut[t, z]
    var[t, z] = j
    cut[t, z] = c
    for k in range(nu_):
        cnt2[k] = 0.0
        sm2[k] = 0.0
    for i in range(N):
        k = leaf_of[t, i]
        if _is_ancestor(z, k, parent, t):
            k = _route_from(z, var, cut, left, right, t, X, i)
            cnt2[k] += 1.0
            sm2[k] += r[i]
        new_leaf[i] = k
    log_r = 0.0
    empty = False
    for k in range(nu_):
        if var[t, k] == LEAF and _is_ancestor(z, k, parent, t):
            if cnt2[k] == 0.0:
                empty = True
                break
            log_r += (node_loglik_reduced(cnt2[k], sm2[k], sigma2, sigma_mu2)
                      - node_loglik_reduced(cnt[k], sm[k], sigma2, sigma_mu2))
    if empty or not math.log(rng.random()) < log_r:
        var[t, z] = old_j
        cut[t, z] = old_c
        return move
    for i in range(N):
        leaf_of[t, i] = new_leaf[i]
    moves[3 + move] += 1
    return move


@njit
def draw_leaf_values(t, var, mu, n_used, leaf_of, r, sigma2, sigma_mu2, rng, cnt, sm):
    """Conjugate normal draw of every leaf value of tree ``t``."""
    leaf_sufficient_stats(t, n_used, leaf_of, r, cnt, sm)
    for k in range(n_used[t]):
        if var[t, k] == LEAF:
            v = 1.0 / (cnt[k] / sigma2 + 1.0 / sigma_mu2)
            m = v * sm[k] / sigma2
            mu[t, k] = m + math.sqrt(v) * rng.standard_normal()


@njit
def write_preorder(t, var, cut, mu, left, right, depth, out_var, out_val, out_right,
                   out_depth, pos, stack, patch):
    """Append tree ``t`` to the output buffers in preorder; return new ``pos``."""
    start = pos
    top = 0
    stack[0] = 0
    patch[0] = -1
    top = 1
    while top > 0:
        top -= 1
        k = stack[top]
        at = patch[top]
        if at >= 0:
            out_right[at] = pos - start
        v = var[t, k]
        out_var[pos] = v
        out_depth[pos] = depth[t, k]
        if v >= 0:
            out_val[pos] = cut[t, k]
            stack[top] = right[t, k]
            patch[top] = pos
            stack[top + 1] = left[t, k]
            patch[top + 1] = -1
            top += 2
        else:
            out_val[pos] = mu[t, k]
            out_right[pos] = -1
        pos += 1
    return pos


@njit
def _grow_i32(a, n):
    b = np.empty(n, np.int32)
    b[: a.shape[0]] = a
    return b


@njit
def _grow_f64(a, n):
    b = np.empty(n, np.float64)
    b[: a.shape[0]] = a
    return b


@njit
def new_arena(K, cap):
    var = np.full((K, cap), FREE, np.int32)
    cut = np.zeros((K, cap))
    mu = np.zeros((K, cap))
    left = np.full((K, cap), -1, np.int32)
    right = np.full((K, cap), -1, np.int32)
    parent = np.full((K, cap), -1, np.int32)
    depth = np.zeros((K, cap), np.int32)
    n_used = np.ones(K, np.int64)
    for t in range(K):
        var[t, 0] = LEAF
    return var, cut, mu, left, right, parent, depth, n_used


@njit
def run_chain(X, y, binary, cut_values, cut_ptr, s_cum, alpha, beta, sigma_mu, nu, lam,
              sigma2_init, K, n_samples, n_burnin, thin, rng, loglik_shift, update_sigma2,
              check):
    """Run one chain of the backfitting MH-within-Gibbs sampler.

    ``y`` is the scaled continuous response or the 0/1 binary response.
    Returns preorder node buffers of the retained draws plus per-draw
    sigma2, mean training fit, pointwise log likelihood, and move counts.
    """
    N = X.shape[0]
    cap = 2 * N + 1
    var, cut, mu, left, right, parent, depth, n_used = new_arena(K, cap)
    leaf_of = np.zeros((K, N), np.int32)
    fit = np.zeros(N)
    old = np.zeros(N)
    r = np.zeros(N)
    z = np.zeros(N)
    cnt = np.zeros(cap)
    sm = np.zeros(cap)
    cnt2 = np.zeros(cap)
    sm2 = np.zeros(cap)
    new_leaf = np.zeros(N, np.int32)
    stack = np.zeros(cap + 2, np.int64)
    patch = np.zeros(cap + 2, np.int64)
    moves = np.zeros(6, np.int64)
    sigma_mu2 = sigma_mu * sigma_mu

    if binary:
        sigma2 = 1.0
        draw_latent(y, fit, z, rng)
    else:
        sigma2 = sigma2_init
        for i in range(N):
            z[i] = y[i]

    n_keep = 0
    if n_samples > n_burnin:
        n_keep = (n_samples - n_burnin + thin - 1) // thin
    size = max(16, n_keep * K * 3)
    out_var = np.empty(size, np.int32)
    out_val = np.empty(size, np.float64)
    out_right = np.empty(size, np.int32)
    out_depth = np.empty(size, np.int32)
    tree_ptr = np.zeros(n_keep * K + 1, np.int64)
    sig_out = np.empty(n_keep)
    fit_mean = np.empty(n_keep)
    ll_out = np.empty((n_keep, N))
    keep = 0
    pos = 0

    for it in range(n_samples):
        for t in range(K):
            for i in range(N):
                old[i] = mu[t, leaf_of[t, i]]
                r[i] = z[i] - fit[i] + old[i]
            mh_step(t, var, cut, mu, left, right, parent, depth, n_used, leaf_of, r, X,
                    cut_values, cut_ptr, s_cum, alpha, beta, sigma2, sigma_mu2, rng,
                    cnt, sm, cnt2, sm2, new_leaf, moves)
            draw_leaf_values(t, var, mu, n_used, leaf_of, r, sigma2, sigma_mu2, rng, cnt, sm)
            for i in range(N):
                fit[i] = fit[i] - old[i] + mu[t, leaf_of[t, i]]

        if binary:
            draw_latent(y, fit, z, rng)
        elif update_sigma2:
            ssr = 0.0
            for i in range(N):
                e = z[i] - fit[i]
                ssr += e * e
            shape = 0.5 * (N + nu)
            scale = 0.5 * (nu * lam + ssr)
            sigma2 = scale / rng.gamma(shape, 1.0)

        if check:
            for i in range(N):
                tot = 0.0
                for t in range(K):
                    k = _route_from(0, var, cut, left, right, t, X, i)
                    if k != leaf_of[t, i]:
                        raise RuntimeError("leaf bookkeeping out of sync")
                    tot += mu[t, k]
                if abs(tot - fit[i]) > 1e-8 * (1.0 + abs(tot)):
                    raise RuntimeError("backfitting identity violated")

        if it >= n_burnin and (it - n_burnin) % thin == 0:
            need = pos + K * cap
            if need > out_var.shape[0]:
                new_size = max(2 * out_var.shape[0], need)
                out_var = _grow_i32(out_var, new_size)
                out_val = _grow_f64(out_val, new_size)
                out_right = _grow_i32(out_right, new_size)
                out_depth = _grow_i32(out_depth, new_size)
            for t in range(K):
                tree_ptr[keep * K + t] = pos
                pos = write_preorder(t, var, cut, mu, left, right, depth, out_var, out_val,
                                     out_right, out_depth, pos, stack, patch)
            tree_ptr[keep * K + K] = pos
            sig_out[keep] = sigma2
            tot = 0.0
            for i in range(N):
                tot += fit[i]
                if binary:
                    pr = std_normal_cdf(fit[i])
                    pr = min(max(pr, PROB_CLAMP), 1.0 - PROB_CLAMP)
                    ll_out[keep, i] = math.log(pr) if y[i] > 0.5 else math.log(1.0 - pr)
                else:
                    e = y[i] - fit[i]
                    ll_out[keep, i] = -0.5 * (LOG_2PI + math.log(sigma2)) - 0.5 * e * e / sigma2 + loglik_shift
            fit_mean[keep] = tot / N
            keep += 1

    return (tree_ptr, out_var[:pos].copy(), out_val[:pos].copy(), out_right[:pos].copy(),
            out_depth[:pos].copy(), sig_out, fit_mean, ll_out, moves)


@njit
def predict_draws(tree_ptr, node_var, node_val, node_right, K, X):
    """Latent sum-of-trees prediction for every draw: shape (n_draws, n_rows)."""
    n_draws = (tree_ptr.shape[0] - 1) // K
    M = X.shape[0]
    out = np.zeros((n_draws, M))
    for d in range(n_draws):
        for t in range(K):
            start = tree_ptr[d * K + t]
            for i in range(M):
                k = start
                while node_var[k] >= 0:
                    if X[i, node_var[k]] <= node_val[k]:
                        k += 1
                    else:
                        k = start + node_right[k]
                out[d, i] += node_val[k]
    return out


def predict_draws_numpy(tree_ptr, node_var, node_val, node_right, K, X):
    """Vectorised fallback of :func:`predict_draws` (routes all rows level by level)."""
    n_draws = (len(tree_ptr) - 1) // K
    M = X.shape[0]
    out = np.zeros((n_draws, M))
    rows = np.arange(M)
    for d in range(n_draws):
        acc = out[d]
        for t in range(K):
            start = tree_ptr[d * K + t]
            k = np.full(M, start, dtype=np.int64)
            v = node_var[k]
            internal = v >= 0
            while internal.any():
                ki = k[internal]
                go_left = X[rows[internal], v[internal]] <= node_val[ki]
                k[internal] = np.where(go_left, ki + 1, start + node_right[ki])
                v = node_var[k]
                internal = v >= 0
            acc += node_val[k]
    return out
