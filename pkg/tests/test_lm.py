"""Tokenizer, causal LM, answer-masked loss, LoRA, and generation."""

import math

import pytest
import torch

from dualvid.errors import ConfigError, ContextOverflowError, EmptyLossMaskError
from dualvid.lm import (
    BOS_ID,
    BYTE_VOCAB_SIZE,
    EOS_ID,
    CausalLM,
    LMConfig,
    LoraConfig,
    LoraLinear,
    TokenizedTurn,
    apply_lora,
    decode_tokens,
    encode_text,
    generate,
    generate_text,
    lora_parameter_count,
    lora_parameters,
    make_turn,
    nll_loss,
    render_prompt,
)

TOY = LMConfig(vocab_size=BYTE_VOCAB_SIZE, embed_dim=16, num_layers=2,
               num_heads=2, context_window=128)


class TestTokenizer:
    def test_ascii_round_trip(self):
        text = "What happens at the end?"
        assert decode_tokens(encode_text(text)) == text

    def test_multibyte_round_trip(self):
        text = "café ∞ 猫"
        assert decode_tokens(encode_text(text)) == text

    def test_specials_dropped_on_decode(self):
        ids = [BOS_ID] + encode_text("hi") + [EOS_ID]
        assert decode_tokens(ids) == "hi"

    def test_byte_range(self):
        ids = encode_text("a\x00\xff")
        assert all(0 <= i < 256 for i in ids)
        assert BYTE_VOCAB_SIZE == 259


class TestMakeTurn:
    def test_shift_alignment(self):
        turn = make_turn("why", "because")
        assert torch.equal(turn.input_ids[1:], turn.target_ids[:-1])
        assert turn.input_ids[0].item() == BOS_ID
        assert turn.target_ids[-1].item() == EOS_ID

    def test_mask_covers_answer_and_eos_only(self):
        question, answer = "what color", "blue"
        turn = make_turn(question, answer)
        expected_masked = len(answer.encode("utf-8")) + 1
        assert int(turn.loss_mask.sum()) == expected_masked
        # masked positions are a suffix ending at EOS
        masked = turn.loss_mask.nonzero().squeeze(1).tolist()
        assert masked == list(range(len(turn) - expected_masked, len(turn)))

    def test_prompt_tokens_unmasked(self):
        turn = make_turn("q", "a")
        prompt_len = 1 + len(render_prompt("q").encode("utf-8"))
        assert int(turn.loss_mask[: prompt_len - 1].sum()) == 0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TokenizedTurn(torch.zeros(3, dtype=torch.long),
                          torch.zeros(2, dtype=torch.long),
                          torch.zeros(3, dtype=torch.long))

    def test_mask_values_checked(self):
        with pytest.raises(ValueError):
            TokenizedTurn(torch.zeros(2, dtype=torch.long),
                          torch.zeros(2, dtype=torch.long),
                          torch.tensor([0, 2]))


class TestForward:
    def test_single_token(self):
        model = CausalLM(TOY, seed=0)
        logits = model.forward_ids(torch.tensor([BOS_ID]))
        assert tuple(logits.shape) == (1, BYTE_VOCAB_SIZE)

    def test_deterministic_given_seed(self):
        ids = torch.tensor(encode_text("same input"))
        a = CausalLM(TOY, seed=7).forward_ids(ids)
        b = CausalLM(TOY, seed=7).forward_ids(ids)
        assert torch.equal(a, b)

    def test_causality_jacobian_sparsity(self):
        model = CausalLM(TOY, seed=1)
        ids = torch.tensor(encode_text("abcdefgh"))
        embeds = model.embed_tokens(ids)
        base = model.forward_embeddings(embeds)
        for t in (0, 3, 6):
            perturbed = embeds.clone()
            perturbed[t + 1] += 0.5
            out = model.forward_embeddings(perturbed)
            assert torch.equal(out[: t + 1], base[: t + 1])
            assert not torch.equal(out[t + 1], base[t + 1])

    def test_context_overflow(self):
        model = CausalLM(LMConfig(embed_dim=16, num_layers=1, num_heads=2,
                                  context_window=8), seed=0)
        with pytest.raises(ContextOverflowError):
            model.forward_ids(torch.zeros(9, dtype=torch.long))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LMConfig(embed_dim=10, num_heads=4)
        with pytest.raises(ValueError):
            LMConfig(num_layers=0)


class TestNllLoss:
    def test_uniform_logits_give_log_vocab(self):
        vocab = 17
        length = 5
        logits = torch.zeros(length, vocab)
        turn = TokenizedTurn(torch.zeros(length, dtype=torch.long),
                             torch.randint(0, vocab, (length,)),
                             torch.tensor([1, 0, 1, 1, 0]))
        loss = nll_loss(logits, turn)
        assert loss.item() == pytest.approx(math.log(vocab), abs=1e-6)

    def test_two_position_hand_computed(self):
        # independent scalar computation straight from the softmax formula
        logits = torch.tensor([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        targets = torch.tensor([1, 2])
        turn = TokenizedTurn(torch.zeros(2, dtype=torch.long), targets,
                             torch.ones(2, dtype=torch.long))

        def nll(row, t):
            z = [math.exp(v) for v in row]
            return -math.log(z[t] / sum(z))

        expected = (nll([1.0, 2.0, 0.5], 1) + nll([0.0, -1.0, 3.0], 2)) / 2
        assert nll_loss(logits, turn).item() == pytest.approx(expected, abs=1e-6)

    def test_masked_out_target_is_irrelevant(self):
        logits = torch.randn(4, 9)
        targets = torch.tensor([1, 2, 3, 4])
        mask = torch.tensor([1, 0, 1, 0])
        base = nll_loss(logits, TokenizedTurn(torch.zeros(4, dtype=torch.long),
                                              targets, mask))
        altered = targets.clone()
        altered[1] = 7
        altered[3] = 0
        out = nll_loss(logits, TokenizedTurn(torch.zeros(4, dtype=torch.long),
                                             altered, mask))
        assert out.item() == base.item()

    def test_empty_mask_raises(self):
        logits = torch.randn(3, 9)
        turn = TokenizedTurn(torch.zeros(3, dtype=torch.long),
                             torch.zeros(3, dtype=torch.long),
                             torch.zeros(3, dtype=torch.long))
        with pytest.raises(EmptyLossMaskError):
            nll_loss(logits, turn)

    def test_length_mismatch_raises(self):
        turn = make_turn("q", "a")
        with pytest.raises(ValueError):
            nll_loss(torch.randn(3, BYTE_VOCAB_SIZE), turn)


class TestLora:
    def test_identity_at_init(self):
        model = CausalLM(TOY, seed=3)
        ids = torch.tensor(encode_text("check identity"))
        before = model.forward_ids(ids)
        apply_lora(model, LoraConfig(rank=4))
        after = model.forward_ids(ids)
        assert torch.equal(before, after)

    def test_parameter_count(self):
        model = CausalLM(LMConfig(embed_dim=128, num_layers=1, num_heads=4,
                                  context_window=32), seed=0)
        apply_lora(model, LoraConfig(rank=64))
        # q_proj and v_proj in one block, each 128-wide square: 2 * (2*64*128)
        assert lora_parameter_count(model) == 2 * 2 * 64 * 128

    def test_unknown_target_rejected(self):
        model = CausalLM(TOY, seed=0)
        with pytest.raises(ConfigError):
            apply_lora(model, LoraConfig(rank=2, targets=("w_qkv",)))

    def test_update_touches_only_lora_params(self):
        model = CausalLM(TOY, seed=5)
        apply_lora(model, LoraConfig(rank=2))
        snapshot = {n: p.detach().clone() for n, p in model.named_parameters()}
        opt = torch.optim.SGD(list(lora_parameters(model)), lr=0.5)
        turn = make_turn("what", "this")
        loss = nll_loss(model.forward_ids(turn.input_ids), turn)
        loss.backward()
        opt.step()
        for name, p in model.named_parameters():
            if "lora_b" in name:
                assert not torch.equal(p, snapshot[name]), name
            elif "lora_a" not in name:
                assert torch.equal(p, snapshot[name]), name

    def test_base_weights_frozen_by_wrapper(self):
        layer = torch.nn.Linear(8, 8)
        wrapped = LoraLinear(layer, rank=2, scaling=1.0)
        assert not wrapped.base.weight.requires_grad
        assert wrapped.lora_a.requires_grad and wrapped.lora_b.requires_grad

    def test_scaling_is_alpha_over_rank(self):
        assert LoraConfig(rank=4).scaling == 1.0
        assert LoraConfig(rank=4, alpha=8.0).scaling == 2.0
        layer = torch.nn.Linear(6, 6)
        x = torch.randn(3, 6)
        one = LoraLinear(layer, rank=2, scaling=1.0)
        two = LoraLinear(layer, rank=2, scaling=2.0)
        with torch.no_grad():
            two.lora_a.copy_(one.lora_a)
            one.lora_b.fill_(0.3)
            two.lora_b.fill_(0.3)
        delta_one = one(x) - layer(x)
        delta_two = two(x) - layer(x)
        assert torch.allclose(delta_two, 2 * delta_one, atol=1e-6)

    def test_rank_validation(self):
        with pytest.raises(ValueError):
            LoraConfig(rank=0)


class TestGenerate:
    def test_zero_budget_gives_empty(self):
        model = CausalLM(TOY, seed=0)
        prefix = model.embed_tokens(torch.tensor([BOS_ID]))
        result = generate(model, prefix, max_new=0)
        assert result.token_ids == []
        assert result.text == ""

    def test_greedy_is_repeatable(self):
        model = CausalLM(TOY, seed=11)
        prefix = model.embed_tokens(torch.tensor([BOS_ID] + encode_text("go")))
        a = generate(model, prefix, max_new=8, mode="greedy")
        b = generate(model, prefix, max_new=8, mode="greedy")
        assert a.token_ids == b.token_ids

    def test_stops_at_eos(self):
        model = CausalLM(TOY, seed=0)
        with torch.no_grad():
            model.lm_head.bias[EOS_ID] = 100.0
        prefix = model.embed_tokens(torch.tensor([BOS_ID]))
        result = generate(model, prefix, max_new=5)
        assert result.token_ids == [EOS_ID]

    def test_runs_to_max_new_without_eos(self):
        model = CausalLM(TOY, seed=0)
        with torch.no_grad():
            model.lm_head.bias.zero_()
            model.lm_head.bias[ord("A")] = 100.0
        result = generate_text(model, "say a", max_new=6)
        assert result == "AAAAAA"

    def test_sampling_repeatable_with_seeded_generator(self):
        model = CausalLM(TOY, seed=13)
        prefix = model.embed_tokens(torch.tensor([BOS_ID] + encode_text("x")))
        a = generate(model, prefix, max_new=6, mode="sample",
                     generator=torch.Generator().manual_seed(4))
        b = generate(model, prefix, max_new=6, mode="sample",
                     generator=torch.Generator().manual_seed(4))
        assert a.token_ids == b.token_ids

    def test_overflow_rejected_upfront(self):
        model = CausalLM(LMConfig(embed_dim=16, num_layers=1, num_heads=2,
                                  context_window=8), seed=0)
        prefix = model.embed_tokens(torch.zeros(6, dtype=torch.long))
        with pytest.raises(ContextOverflowError):
            generate(model, prefix, max_new=4)

    def test_bad_mode_rejected(self):
        model = CausalLM(TOY, seed=0)
        prefix = model.embed_tokens(torch.tensor([BOS_ID]))
        with pytest.raises(ValueError):
            generate(model, prefix, max_new=1, mode="beams")


class TestGradientCorrectness:
    def test_loss_gradient_matches_finite_differences(self):
        config = LMConfig(vocab_size=11, embed_dim=8, num_layers=2,
                          num_heads=2, context_window=12)
        model = CausalLM(config, seed=17).double()
        gen = torch.Generator().manual_seed(19)
        input_ids = torch.randint(0, 11, (6,), generator=gen)
        target_ids = torch.randint(0, 11, (6,), generator=gen)
        turn = TokenizedTurn(input_ids, target_ids,
                             torch.tensor([0, 1, 1, 0, 1, 1]))

        def loss_value():
            return nll_loss(model.forward_ids(turn.input_ids), turn)

        model.zero_grad()
        loss_value().backward()

        h = 1e-6
        total_checked = 0
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic), 1e-8)
                assert abs(numeric - analytic) / denom < 1e-4, (
                    f"{name}[{i}]: analytic {analytic}, numeric {numeric}"
                )
                total_checked += 1
        assert total_checked == sum(p.numel() for p in model.parameters())
