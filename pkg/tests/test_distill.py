import mpmath
import numpy as np
import pytest

from taskmerge import autodiff as ad
from taskmerge.checkpoint import ParameterSet, init_digest
from taskmerge.distill import (
    CLS_PREFIX,
    DistillError,
    DistillRecipe,
    TeacherBudget,
    TeacherGateError,
    combined_record,
    distill,
    distill_loss,
    merge_only_record,
    resource_report,
    train_teacher,
)
from taskmerge.models import ModelConfig, build_model, parameter_count

TINY = ModelConfig(d_model=16, n_heads=2, conv_channels=8)
QUICK = TeacherBudget(steps=3, batch=4, n_dev=16, gate=0.0)

NEG_LOG_SIGMOID_1 = float(-mpmath.log(1 / (1 + mpmath.e ** -1)))


def states(rng, n_layers=7, shape=(2, 5, 4)):
    return [rng.standard_normal(shape) for _ in range(n_layers)]


def test_loss_at_exact_prediction():
    rng = np.random.default_rng(0)
    t = states(rng)
    preds = [ad.Node(t[k].copy()) for k in (2, 4, 6)]
    loss = distill_loss(preds, t, (2, 4, 6)).value
    assert NEG_LOG_SIGMOID_1 == pytest.approx(0.3133, abs=1e-4)
    assert float(loss) == pytest.approx(3 * NEG_LOG_SIGMOID_1, rel=1e-6)


def test_loss_orthogonal_equal_norms():
    target = np.zeros((1, 3, 2))
    target[..., 0] = 1.0
    pred = np.zeros((1, 3, 2))
    pred[..., 1] = 1.0
    m = np.abs(pred - target).mean()
    loss = distill_loss([ad.Node(pred)], [target], (0,)).value
    assert float(loss) == pytest.approx(m + float(mpmath.log(2)), rel=1e-9)


def test_lambda_zero_is_pure_l1():
    rng = np.random.default_rng(1)
    t = states(rng, 3)
    pred = rng.standard_normal(t[1].shape)
    loss = distill_loss([ad.Node(pred)], t, (1,), loss_lambda=0.0).value
    assert float(loss) == pytest.approx(np.abs(pred - t[1]).mean())


def test_loss_lower_bound():
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = states(rng)
        preds = [ad.Node(rng.standard_normal(t[0].shape)) for _ in range(3)]
        assert float(distill_loss(preds, t, (2, 4, 6)).value) >= 3 * NEG_LOG_SIGMOID_1 - 1e-9


def test_loss_shape_errors():
    rng = np.random.default_rng(3)
    t = states(rng)
    with pytest.raises(ad.ShapeError):
        distill_loss([ad.Node(np.ones((2, 5, 3)))], t, (2,))
    with pytest.raises(ad.ShapeError):
        distill_loss([ad.Node(t[2])], t, (2, 4))


def test_loss_is_differentiable():
    rng = np.random.default_rng(4)
    t = states(rng)
    pred = ad.Node(rng.standard_normal(t[2].shape), requires_grad=True)
    grads = ad.backward(distill_loss([pred], t, (2,)), {"p": pred})
    assert grads["p"].shape == t[2].shape and grads["p"].any()


# ---------------------------------------------------------------- teachers


@pytest.fixture(scope="module")
def teachers():
    return train_teacher(TINY, "S", QUICK, seed=0), train_teacher(TINY, "M", QUICK, seed=1)


def test_teacher_heads_stripped(teachers):
    t_s, _ = teachers
    assert not any(k.startswith(CLS_PREFIX) for k in t_s.keys())
    assert t_s.meta["kind"] == "teacher" and t_s.meta["domain"] == "S"
    assert t_s.num_parameters() == parameter_count(TINY, "teacher")


def test_teacher_deterministic(teachers):
    assert train_teacher(TINY, "S", QUICK, seed=0).equals(teachers[0])


def test_teacher_gate():
    budget = TeacherBudget(steps=2, batch=4, n_dev=24)
    with pytest.raises(TeacherGateError) as err:
        train_teacher(TINY, "M", budget, seed=0)
    assert err.value.domain == "M"
    assert set(err.value.accuracies) == {"pitch_class", "timbre_id"}
    assert "0.95" in str(err.value)


def test_teacher_rejects_unlabeled_domain():
    with pytest.raises(ValueError):
        train_teacher(TINY, "A", QUICK)


def test_cosine_schedule():
    b = TeacherBudget(steps=100, lr=1e-3)
    assert b.lr_at(0) == pytest.approx(1e-3)
    assert b.lr_at(50) == pytest.approx(5e-4)
    assert TeacherBudget(cosine_decay=False).lr_at(700) == 1e-3


# ---------------------------------------------------------------- students


def recipe(teachers, **kw):
    base = dict(student_cfg=TINY, steps=200, batch=2, lr=5e-4, init_from=teachers[0])
    base.update(kw)
    return base


@pytest.fixture(scope="module")
def runs(teachers):
    t_s, t_m = teachers
    single_s = distill(DistillRecipe([t_s], **recipe(teachers)))
    single_m = distill(DistillRecipe([t_m], **recipe(teachers)))
    ensemble = distill(DistillRecipe([t_s, t_m], **recipe(teachers)))
    return single_s, single_m, ensemble


def test_student_parameter_counts(runs):
    single, _, ensemble = runs
    d = TINY.d_model
    trunk = parameter_count(TINY, "student", 0)
    assert single.parameters == trunk + 3 * (d * d + d)
    assert ensemble.parameters == trunk + 6 * (d * d + d)
    assert ensemble.parameters - single.parameters == 3 * (d * d + d)


def test_loss_curve_contract(runs):
    for r in runs:
        assert len(r.loss_curve) == r.steps // 100
        assert np.isfinite(r.loss_curve).all()


def test_shared_init_digest(runs):
    single_s, single_m, _ = runs
    assert single_s.student.init_digest == single_m.student.init_digest
    assert single_s.student.meta["teachers"] == "S" and single_m.student.meta["teachers"] == "M"


def test_teachers_are_not_modified(teachers):
    t_s, t_m = teachers
    before = [init_digest(t_s), init_digest(t_m)]
    distill(DistillRecipe([t_s, t_m], **recipe(teachers, steps=2)))
    assert [init_digest(t_s), init_digest(t_m)] == before


def test_distill_deterministic(teachers, runs):
    again = distill(DistillRecipe([teachers[0]], **recipe(teachers)))
    assert again.student.equals(runs[0].student)
    assert again.loss_curve == runs[0].loss_curve


def test_recipe_validation(teachers):
    with pytest.raises(DistillError):
        DistillRecipe([], student_cfg=TINY)
    with pytest.raises(DistillError):
        DistillRecipe([teachers[0]] * 3, student_cfg=TINY)
    with pytest.raises(DistillError):
        DistillRecipe([teachers[0]], student_cfg=TINY, steps=0)


def test_dimension_mismatch(teachers):
    wide = build_model(ModelConfig(d_model=32, n_heads=2, conv_channels=8), "teacher", 0)
    with pytest.raises(DistillError, match="mismatch"):
        distill(DistillRecipe([wide], student_cfg=TINY, steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(teachers):
    t_s = teachers[0]
    broken = ParameterSet({k: np.full_like(v, np.nan) if k == "encoder.layer.5.ffn.out.weight" else v for k, v in t_s.items()}, t_s.meta)
    with pytest.raises(DistillError, match="non-finite"):
        distill(DistillRecipe([broken], **recipe(teachers, steps=2)))


# ---------------------------------------------------------------- accounting


def test_resource_report(runs):
    single, _, ensemble = runs
    rows = resource_report([single, merge_only_record(), ensemble])
    assert [r["method"] for r in rows] == sorted(r["method"] for r in rows)
    case2 = next(r for r in rows if r["method"] == "Task Arithmetic (case 2)")
    assert case2["seconds_per_step"] == 0 and case2["parameters"] == "-"
    (echo,) = resource_report([single])
    assert echo["parameters"] == single.parameters
    assert echo["wall_clock"] == round(single.wall_clock, 3)


def test_combined_record_adds_time(runs):
    a, b, _ = runs
    c = combined_record([a, b])
    assert c.wall_clock == pytest.approx(a.wall_clock + b.wall_clock)
    assert c.steps == a.steps + b.steps
    assert c.parameters == a.parameters
