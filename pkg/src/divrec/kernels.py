"""Batch kernels: two-way hinge forward/backward and relation backprop.

These are plain-array functions compiled with numba for training-speed inner
loops. Set ``DIVREC_DISABLE_NUMBA=1`` to run the identical code uncompiled
(slow, handy under a debugger). All loops are single-threaded so results are
bit-reproducible run to run.

Conventions: embeddings are (rows, D) float64, flat history/audience lists
are int64 index arrays with (rows + 1) offset pointers, and gradient
accumulators are dense arrays the caller zero-initializes. The hinge uses the
subgradient 0 at the kink, and |.| in the std construction uses sign(0) = 0.
Each entity's attention state (weights and projected context) is computed
once per triple and reused by the backward pass.
"""

from __future__ import annotations

import os

import numpy as np

if os.environ.get("DIVREC_DISABLE_NUMBA"):

    def njit(*args, **kwargs):  # pragma: no cover - debugging escape hatch
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

else:
    from numba import njit

# numpy error model: float division by zero yields inf/nan for the health
# check downstream instead of raising mid-kernel
_JIT = {"cache": True, "fastmath": True, "error_model": "numpy"}


@njit(**_JIT)
def _matvec_t(mat, vec):
    # mat.T @ vec for (A, B) mat, (A,) vec -> (B,)
    a, b = mat.shape
    out = np.zeros(b)
    for i in range(a):
        vi = vec[i]
        if vi != 0.0:
            for j in range(b):
                out[j] += mat[i, j] * vi
    return out


@njit(**_JIT)
def _matvec(mat, vec):
    # mat @ vec for (A, B) mat, (B,) vec -> (A,)
    a, b = mat.shape
    out = np.zeros(a)
    for i in range(a):
        acc = 0.0
        for j in range(b):
            acc += mat[i, j] * vec[j]
        out[i] = acc
    return out


@njit(**_JIT)
def _sqdist(x, y):
    acc = 0.0
    for d in range(x.shape[0]):
        diff = x[d] - y[d]
        acc += diff * diff
    return acc


@njit(**_JIT)
def _attend_state(ctx, attention, members, idx, lo, hi):
    """Forward attention of ctx over members[idx[lo:hi]].

    Returns (h, weights, y) where y = attention^T ctx; logits are y . e_j.
    """
    d_dim = ctx.shape[0]
    y = _matvec_t(attention, ctx)
    n = hi - lo
    weights = np.empty(n)
    for j in range(n):
        row = idx[lo + j]
        acc = 0.0
        for d in range(d_dim):
            acc += y[d] * members[row, d]
        weights[j] = acc
    m = weights[0]
    for j in range(1, n):
        if weights[j] > m:
            m = weights[j]
    z = 0.0
    for j in range(n):
        weights[j] = np.exp(weights[j] - m)
        z += weights[j]
    h = np.zeros(d_dim)
    for j in range(n):
        weights[j] /= z
        row = idx[lo + j]
        a = weights[j]
        for d in range(d_dim):
            h[d] += a * members[row, d]
    return h, weights, y


@njit(**_JIT)
def _attend_backward(ctx, attention, members, idx, lo, hi, weights, y, upstream,
                     g_members, g_attention, touched_members):
    """Backprop ``upstream`` through an attention aggregate with saved state.

    Accumulates member/attention gradients and returns the context gradient.
    """
    d_dim = ctx.shape[0]
    n = hi - lo

    # softmax jacobian: gs_j = a_j (c_j - sum_l a_l c_l), c_j = upstream . e_j
    c = np.empty(n)
    cbar = 0.0
    for j in range(n):
        row = idx[lo + j]
        acc = 0.0
        for d in range(d_dim):
            acc += upstream[d] * members[row, d]
        c[j] = acc
        cbar += weights[j] * acc

    mvec = np.zeros(d_dim)
    for j in range(n):
        row = idx[lo + j]
        a = weights[j]
        gs = a * (c[j] - cbar)
        touched_members[row] = True
        for d in range(d_dim):
            # value path (a_j * upstream) plus logit path (gs_j * y)
            g_members[row, d] += a * upstream[d] + gs * y[d]
            mvec[d] += gs * members[row, d]
    for a_i in range(d_dim):
        ca = ctx[a_i]
        for b_i in range(d_dim):
            g_attention[a_i, b_i] += ca * mvec[b_i]
    return _matvec(attention, mvec)


@njit(**_JIT)
def _diversity_vec(asp_w, t_mu, t_sig, eps):
    """mu + eps * |sigma_raw| for one entity."""
    mu = _matvec_t(t_mu, asp_w)
    sraw = _matvec_t(t_sig, asp_w)
    for d in range(mu.shape[0]):
        mu[d] += eps[d] * abs(sraw[d])
    return mu


@njit(**_JIT)
def _diversity_backward(asp_w, t_sig, eps, upstream, g_mu, g_sig):
    """Backprop through mu + eps * |sigma_raw| into the aspect matrices."""
    k_dim = asp_w.shape[0]
    d_dim = upstream.shape[0]
    sraw = _matvec_t(t_sig, asp_w)
    for d in range(d_dim):
        s = sraw[d]
        sign = 1.0 if s > 0.0 else (-1.0 if s < 0.0 else 0.0)
        gs = upstream[d] * eps[d] * sign
        gm = upstream[d]
        for k in range(k_dim):
            g_mu[k, d] += asp_w[k] * gm
            g_sig[k, d] += asp_w[k] * gs


@njit(**_JIT)
def _relation_forward(ctx, attention, members, idx, lo, hi,
                      asp_w, t_mu, t_sig, eps,
                      use_attention, use_diversity):
    """Relation vector h + h' for one entity (state discarded)."""
    d_dim = ctx.shape[0]
    r = np.zeros(d_dim)
    if use_attention and hi > lo:
        h, _, _ = _attend_state(ctx, attention, members, idx, lo, hi)
        for d in range(d_dim):
            r[d] += h[d]
    if use_diversity:
        hp = _diversity_vec(asp_w, t_mu, t_sig, eps)
        for d in range(d_dim):
            r[d] += hp[d]
    return r


@njit(**_JIT)
def _relation_backward_entity(ctx, ctx_row, attention, members, idx, lo, hi,
                              asp_w, t_mu, t_sig, eps, upstream,
                              use_attention, use_diversity,
                              g_ctx_table, g_members, g_attention, g_mu, g_sig,
                              touched_ctx, touched_members):
    """Backprop an upstream gradient on a relation vector into its inputs."""
    if use_diversity:
        _diversity_backward(asp_w, t_sig, eps, upstream, g_mu, g_sig)
    if use_attention and hi > lo:
        _, weights, y = _attend_state(ctx, attention, members, idx, lo, hi)
        g_ctx = _attend_backward(ctx, attention, members, idx, lo, hi, weights, y,
                                 upstream, g_members, g_attention, touched_members)
        touched_ctx[ctx_row] = True
        for d in range(ctx.shape[0]):
            g_ctx_table[ctx_row, d] += g_ctx[d]


@njit(**_JIT)
def margin_pass(user_emb, item_emb, attention, t_mu, t_sig,
                user_asp, item_asp,
                users, pos, negs,
                hist_idx, hist_ptr, aud_idx, aud_ptr,
                eps_user, eps_pos, eps_neg,
                weights, margin,
                use_attention, use_diversity, use_backward,
                g_user, g_item, g_attn, g_mu, g_sig,
                touched_u, touched_i,
                r_fw_out, r_bw_out):
    """Two-way hinge loss and gradient for one branch on one batch.

    ``weights`` is the per-triple objective weight (branch weight already
    divided by the batch size); gradients are accumulated pre-scaled by it.
    Returns the unweighted per-triple margin losses (mean over negatives)
    plus a per-triple sum of all squared distances; the latter is a pure
    accumulation that goes non-finite whenever any distance does (hinge
    comparisons alone would silently skip NaN arguments).
    A negative with an empty audience contributes no backward hinge. The
    positives' relation vectors are written to ``r_fw_out``/``r_bw_out`` for
    the cross-branch consistency term.
    """
    batch = users.shape[0]
    num_neg = negs.shape[1]
    d_dim = user_emb.shape[1]
    margins = np.zeros(batch)
    health = np.zeros(batch)
    empty_state = np.zeros(0)

    for i in range(batch):
        u = users[i]
        v = pos[i]
        c = weights[i] / num_neg
        take_grads = c != 0.0

        # ---- user forward state: t_u = p_u + h_fw + h'_u
        hist_lo = hist_ptr[u]
        hist_hi = hist_ptr[u + 1]
        has_hist = use_attention and hist_hi > hist_lo
        if has_hist:
            h_fw, a_u, y_u = _attend_state(user_emb[u], attention, item_emb,
                                           hist_idx, hist_lo, hist_hi)
        else:
            h_fw, a_u, y_u = np.zeros(d_dim), empty_state, empty_state
        t_u = np.empty(d_dim)
        for d in range(d_dim):
            r = h_fw[d]
            t_u[d] = user_emb[u, d] + r
            r_fw_out[i, d] = r
        if use_diversity:
            hp_u = _diversity_vec(user_asp[u], t_mu, t_sig, eps_user[i])
            for d in range(d_dim):
                t_u[d] += hp_u[d]
                r_fw_out[i, d] += hp_u[d]

        d_pos_fw = _sqdist(t_u, item_emb[v])

        # ---- positive item backward state: t_v = q_v + h_bw + h'_v
        d_pos_bw = 0.0
        t_v = np.zeros(d_dim)
        aud_lo = aud_ptr[v]
        aud_hi = aud_ptr[v + 1]
        has_aud = use_backward and use_attention and aud_hi > aud_lo
        b_v = empty_state
        y_v = empty_state
        if use_backward:
            if has_aud:
                h_bw, b_v, y_v = _attend_state(item_emb[v], attention, user_emb,
                                               aud_idx, aud_lo, aud_hi)
            else:
                h_bw = np.zeros(d_dim)
            for d in range(d_dim):
                r = h_bw[d]
                t_v[d] = item_emb[v, d] + r
                r_bw_out[i, d] = r
            if use_diversity:
                hp_v = _diversity_vec(item_asp[v], t_mu, t_sig, eps_pos[i])
                for d in range(d_dim):
                    t_v[d] += hp_v[d]
                    r_bw_out[i, d] += hp_v[d]
            d_pos_bw = _sqdist(t_v, user_emb[u])

        # ---- negatives: hinges plus their own gradient pieces
        loss_i = 0.0
        dist_sum = d_pos_fw + d_pos_bw
        n_act_fw = 0
        n_act_bw = 0
        g_t = np.zeros(d_dim)  # upstream on t_u (negative part)
        for k in range(num_neg):
            n = negs[i, k]
            d_neg_fw = _sqdist(t_u, item_emb[n])
            dist_sum += d_neg_fw
            arg = d_pos_fw - d_neg_fw + margin
            if arg > 0.0:
                loss_i += arg
                n_act_fw += 1
                if take_grads:
                    touched_i[n] = True
                    for d in range(d_dim):
                        e_k = t_u[d] - item_emb[n, d]
                        g_t[d] -= 2.0 * c * e_k
                        g_item[n, d] += 2.0 * c * e_k
            if use_backward:
                n_lo = aud_ptr[n]
                n_hi = aud_ptr[n + 1]
                if n_hi <= n_lo:
                    continue  # cold negative: no backward hinge
                if use_attention:
                    h_n, b_n, y_n = _attend_state(item_emb[n], attention, user_emb,
                                                  aud_idx, n_lo, n_hi)
                else:
                    h_n, b_n, y_n = np.zeros(d_dim), empty_state, empty_state
                t_n = np.empty(d_dim)
                for d in range(d_dim):
                    t_n[d] = item_emb[n, d] + h_n[d]
                if use_diversity:
                    hp_n = _diversity_vec(item_asp[n], t_mu, t_sig, eps_neg[i, k])
                    for d in range(d_dim):
                        t_n[d] += hp_n[d]
                d_neg_bw = _sqdist(t_n, user_emb[u])
                dist_sum += d_neg_bw
                argb = d_pos_bw - d_neg_bw + margin
                if argb > 0.0:
                    loss_i += argb
                    n_act_bw += 1
                    if take_grads:
                        g_tn = np.empty(d_dim)
                        touched_u[u] = True
                        touched_i[n] = True
                        for d in range(d_dim):
                            e_kb = t_n[d] - user_emb[u, d]
                            g_user[u, d] += 2.0 * c * e_kb
                            g_tn[d] = -2.0 * c * e_kb
                            g_item[n, d] += g_tn[d]
                        if use_diversity:
                            _diversity_backward(item_asp[n], t_sig, eps_neg[i, k],
                                                g_tn, g_mu, g_sig)
                        if use_attention:
                            g_ctx = _attend_backward(item_emb[n], attention, user_emb,
                                                     aud_idx, n_lo, n_hi, b_n, y_n,
                                                     g_tn, g_user, g_attn, touched_u)
                            for d in range(d_dim):
                                g_item[n, d] += g_ctx[d]
        margins[i] = loss_i / num_neg
        health[i] = dist_sum

        if not take_grads:
            continue

        # ---- finalize the forward direction through t_u
        if n_act_fw > 0:
            touched_i[v] = True
            for d in range(d_dim):
                e_pos = t_u[d] - item_emb[v, d]
                g_t[d] += 2.0 * c * n_act_fw * e_pos
                g_item[v, d] -= 2.0 * c * n_act_fw * e_pos
            touched_u[u] = True
            for d in range(d_dim):
                g_user[u, d] += g_t[d]
            if use_diversity:
                _diversity_backward(user_asp[u], t_sig, eps_user[i], g_t, g_mu, g_sig)
            if has_hist:
                g_ctx = _attend_backward(user_emb[u], attention, item_emb,
                                         hist_idx, hist_lo, hist_hi, a_u, y_u,
                                         g_t, g_item, g_attn, touched_i)
                for d in range(d_dim):
                    g_user[u, d] += g_ctx[d]

        # ---- finalize the backward direction through t_v
        if use_backward and n_act_bw > 0:
            g_tv = np.empty(d_dim)
            touched_u[u] = True
            touched_i[v] = True
            for d in range(d_dim):
                e_pos = t_v[d] - user_emb[u, d]
                g_tv[d] = 2.0 * c * n_act_bw * e_pos
                g_user[u, d] -= g_tv[d]
                g_item[v, d] += g_tv[d]
            if use_diversity:
                _diversity_backward(item_asp[v], t_sig, eps_pos[i], g_tv, g_mu, g_sig)
            if has_aud:
                g_ctx = _attend_backward(item_emb[v], attention, user_emb,
                                         aud_idx, aud_lo, aud_hi, b_v, y_v,
                                         g_tv, g_user, g_attn, touched_u)
                for d in range(d_dim):
                    g_item[v, d] += g_ctx[d]

    return margins, health


@njit(**_JIT)
def relation_pass(user_emb, item_emb, attention, t_mu, t_sig,
                  user_asp, item_asp,
                  users, pos,
                  hist_idx, hist_ptr, aud_idx, aud_ptr,
                  eps_user, eps_pos,
                  use_attention, use_diversity, use_backward,
                  r_fw_out, r_bw_out):
    """Relation vectors of one branch on (user, positive) pairs only."""
    batch = users.shape[0]
    d_dim = user_emb.shape[1]
    for i in range(batch):
        u = users[i]
        v = pos[i]
        r_fw = _relation_forward(user_emb[u], attention, item_emb,
                                 hist_idx, hist_ptr[u], hist_ptr[u + 1],
                                 user_asp[u], t_mu, t_sig, eps_user[i],
                                 use_attention, use_diversity)
        for d in range(d_dim):
            r_fw_out[i, d] = r_fw[d]
        if use_backward:
            r_bw = _relation_forward(item_emb[v], attention, user_emb,
                                     aud_idx, aud_ptr[v], aud_ptr[v + 1],
                                     item_asp[v], t_mu, t_sig, eps_pos[i],
                                     use_attention, use_diversity)
            for d in range(d_dim):
                r_bw_out[i, d] = r_bw[d]


@njit(**_JIT)
def relation_backward(user_emb, item_emb, attention, t_mu, t_sig,
                      user_asp, item_asp,
                      users, pos,
                      hist_idx, hist_ptr, aud_idx, aud_ptr,
                      eps_user, eps_pos,
                      up_fw, up_bw,
                      use_attention, use_diversity, use_backward,
                      g_user, g_item, g_attn, g_mu, g_sig,
                      touched_u, touched_i):
    """Backprop upstream gradients on relation vectors into one branch."""
    batch = users.shape[0]
    for i in range(batch):
        u = users[i]
        v = pos[i]
        _relation_backward_entity(user_emb[u], u, attention, item_emb,
                                  hist_idx, hist_ptr[u], hist_ptr[u + 1],
                                  user_asp[u], t_mu, t_sig, eps_user[i], up_fw[i],
                                  use_attention, use_diversity,
                                  g_user, g_item, g_attn, g_mu, g_sig,
                                  touched_u, touched_i)
        if use_backward:
            _relation_backward_entity(item_emb[v], v, attention, user_emb,
                                      aud_idx, aud_ptr[v], aud_ptr[v + 1],
                                      item_asp[v], t_mu, t_sig, eps_pos[i], up_bw[i],
                                      use_attention, use_diversity,
                                      g_item, g_user, g_attn, g_mu, g_sig,
                                      touched_i, touched_u)
