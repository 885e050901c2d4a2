import json
import subprocess
import threading
from pathlib import Path

import numpy as np
import pytest

from captionattack.errors import (
    BudgetError,
    InternalConsistencyError,
    ProtocolError,
    UnsupportedCapabilityError,
)
from captionattack.oracle import (
    CaptionResult,
    HttpOracle,
    StdioOracle,
    ToyOracle,
    open_endpoint,
)
from captionattack.raster import Image
from captionattack.serve_toy import build_http_server, handle_line
from captionattack.toy import (
    ToyCaptionerConfig,
    surrogate_loss,
    toy_attention,
    toy_caption,
    toy_loss_gradient,
)
from conftest import make_boundary_image
from reference_impls import fd_loss_gradient

GOLDEN = Path(__file__).parent / "golden" / "toy_stdio.jsonl"


def red_block_image(size=64, block=16):
    arr = np.full((size, size, 3), 128, dtype=np.uint8)
    arr[:block, :block] = (255, 0, 0)
    return Image.from_array(arr)


def test_caption_red_block_top_left():
    cfg = ToyCaptionerConfig()
    tokens = toy_caption(cfg, red_block_image())
    assert tokens[:6] == ("a", "red", "patch", "at", "top", "left")
    assert len(tokens) == 12


def test_caption_all_gray_tie_break_and_stability():
    cfg = ToyCaptionerConfig()
    img = Image.filled(64, 64)
    first = toy_caption(cfg, img)
    # ties resolve to the first cells in row-major order
    assert first[4:6] == ("top", "left")
    assert first[10:12] == ("top", "midleft")
    for _ in range(3):
        assert toy_caption(cfg, img) == first


def test_attention_one_grid_per_token_each_sums_to_one(toy_oracle):
    res = toy_oracle.caption(red_block_image(), want_attention=True)
    assert res.attention.grids.shape[0] == len(res.tokens)
    sums = res.attention.grids.reshape(len(res.tokens), -1).sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_attention_content_word_uniform_over_cell():
    cfg = ToyCaptionerConfig()
    img = red_block_image()
    tokens = toy_caption(cfg, img)
    stack = toy_attention(cfg, img, tokens)
    red_grid = stack.grids[1]  # "red", bound to cell (0, 0)
    assert np.all(red_grid[:16, :16] == 1.0 / 256)
    assert np.all(red_grid[16:, :] == 0.0)
    assert np.all(red_grid[:, 16:] == 0.0)


def test_attention_function_word_uniform_over_image():
    cfg = ToyCaptionerConfig()
    img = red_block_image()
    stack = toy_attention(cfg, img, toy_caption(cfg, img))
    assert np.all(stack.grids[0] == 1.0 / (64 * 64))  # "a"
    assert np.all(stack.grids[3] == 1.0 / (64 * 64))  # "at"


def test_six_token_caption_aggregates_to_six():
    cfg = ToyCaptionerConfig(salient_cells=1)
    img = red_block_image(16, 4)
    tokens = toy_caption(cfg, img)
    assert len(tokens) == 6
    stack = toy_attention(cfg, img, tokens)
    assert stack.grids.sum() == pytest.approx(6.0, abs=1e-9)


def test_attention_rejects_foreign_tokens():
    cfg = ToyCaptionerConfig()
    with pytest.raises(InternalConsistencyError):
        toy_attention(cfg, red_block_image(), ("not", "my", "caption"))


def test_caption_result_alignment_enforced(toy_oracle):
    res = toy_oracle.caption(red_block_image(), want_attention=True)
    with pytest.raises(ProtocolError):
        CaptionResult(tokens=res.tokens[:-1], attention=res.attention)


def test_local_stability_below_margin():
    cfg = ToyCaptionerConfig()
    img = make_boundary_image(value=124)  # mean margin 3.5 in the blue channel
    base = toy_caption(cfg, img)
    # one pixel of the 16-pixel cell moves the mean by delta/16: stay below
    arr = img.to_array()
    arr[8 + 0, 4 + 0] = arr[8, 4] + np.array([0, 0, 40], dtype=np.uint8)  # +2.5 mean
    assert toy_caption(cfg, Image.from_array(arr)) == base


def test_flip_above_margin():
    cfg = ToyCaptionerConfig()
    img = make_boundary_image(value=124)
    arr = img.to_array().astype(int)
    arr[8:12, 4:8, 2] += 4  # +4 mean blue: 128 > 127.5 boundary
    flipped = toy_caption(cfg, Image.from_array(arr.astype(np.uint8)))
    assert "magenta" in flipped


def test_gradient_zero_outside_salient_cells():
    cfg = ToyCaptionerConfig()
    img = make_boundary_image()
    grad = toy_loss_gradient(cfg, img)
    assert np.all(grad[0:4, 0:4] == 0.0)  # a gray, non-salient cell


def test_gradient_matches_finite_differences_small():
    # both salient cells need unambiguous nearest/second-nearest anchors:
    # a pure-white cell ties its runner-up three ways and sits on a kink
    cfg = ToyCaptionerConfig()
    arr = np.full((8, 8, 3), 128, dtype=np.uint8)
    arr[4:6, 2:4] = (230, 10, 118)   # near red, runner-up magenta
    arr[6:8, 4:6] = (255, 255, 230)  # near white, runner-up yellow
    img = Image.from_array(arr)
    analytic = toy_loss_gradient(cfg, img)
    numeric = fd_loss_gradient(cfg, img.pixels, h=0.5)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-9)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < 1e-3


def test_loss_decreases_toward_boundary():
    cfg = ToyCaptionerConfig()
    img = make_boundary_image(value=124)
    base = surrogate_loss(cfg, img.pixels)
    arr = img.to_array().astype(float)
    arr[8:12, 4:8, 2] += 2.0  # toward the decision boundary
    assert surrogate_loss(cfg, arr) > base  # maximizing loss shrinks the margin


def test_budget_accounting_and_exhaustion():
    oracle = ToyOracle(call_budget=2)
    img = Image.filled(16, 16)
    oracle.caption(img)
    oracle.caption(img)
    assert oracle.calls_used == 2
    with pytest.raises(BudgetError):
        oracle.caption(img)
    assert oracle.calls_used == 2


def test_open_endpoint_toy_options():
    ep = open_endpoint("toy:grid=2,salient_cells=1")
    assert ep.config.grid == 2
    assert ep.config.salient_cells == 1


# --- wire protocol -----------------------------------------------------------


def test_handle_line_malformed_request():
    resp = handle_line(ToyCaptionerConfig(), "{not json")
    assert "malformed request" in resp["error"]


def test_handle_request_unknown_op():
    resp = handle_line(ToyCaptionerConfig(), json.dumps({"id": "7", "op": "dance"}))
    assert resp["id"] == "7"
    assert "unsupported op" in resp["error"]


def test_stdio_transport_matches_in_process(serve_toy_argv):
    img = make_boundary_image()
    local = ToyOracle().caption(img, want_attention=True)
    with StdioOracle(serve_toy_argv) as remote:
        caps = remote.capabilities()
        assert caps.caption and caps.attention and caps.gradient
        res = remote.caption(img, want_attention=True)
        grad = remote.loss_gradient(img, [local.tokens])
    assert res.tokens == local.tokens
    assert np.allclose(res.attention.grids, local.attention.grids, atol=1e-12)
    assert np.allclose(grad, toy_loss_gradient(ToyCaptionerConfig(), img),
                       atol=1e-6)  # float32 on the wire


def test_stdio_server_error_raises_protocol_error(serve_toy_argv):
    with StdioOracle(serve_toy_argv) as remote:
        remote._caps = remote.capabilities()
        with pytest.raises(ProtocolError):
            remote._checked({"id": "x", "op": "dance"})


def test_http_transport_matches_in_process():
    img = make_boundary_image()
    server = build_http_server(ToyCaptionerConfig(), "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        with HttpOracle(url) as remote:
            caps = remote.capabilities()
            assert caps.gradient
            res = remote.caption(img, want_attention=False)
        assert res.tokens == toy_caption(ToyCaptionerConfig(), img)
    finally:
        server.shutdown()
        thread.join(timeout=5)


def test_want_attention_without_capability_refused(serve_toy_argv):
    with StdioOracle(serve_toy_argv) as remote:
        remote._caps = type(remote.capabilities())(
            caption=True, attention=False, gradient=False
        )
        with pytest.raises(UnsupportedCapabilityError):
            remote.caption(make_boundary_image(), want_attention=True)


def test_gradient_without_capability_refused(serve_toy_argv):
    with StdioOracle(serve_toy_argv) as remote:
        remote._caps = type(remote.capabilities())(
            caption=True, attention=True, gradient=False
        )
        with pytest.raises(UnsupportedCapabilityError):
            remote.loss_gradient(make_boundary_image(), [("a",)])


def test_golden_transcript_replays_byte_exact(serve_toy_argv):
    assert GOLDEN.exists(), "golden transcript missing from the repo"
    lines = [json.loads(line) for line in GOLDEN.read_text().splitlines() if line.strip()]
    proc = subprocess.Popen(
        serve_toy_argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
    )
    try:
        for pair in lines:
            proc.stdin.write(pair["send"] + "\n")
            proc.stdin.flush()
            got = proc.stdout.readline().rstrip("\n")
            assert got == pair["expect"]
    finally:
        proc.stdin.close()
        proc.wait(timeout=10)
